pub mod tensor;
pub mod corpus;
pub mod ranker;
pub mod search;
pub mod termination;
pub mod cli;
