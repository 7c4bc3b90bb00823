use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::CurveEncoderVariant;
use super::{EncodedInput, FeatureSpace, ModelConfig, RankerError, Result};
use crate::corpus::CorpusError;
use crate::tensor::nn::{dense, glorot_uniform, lstm_forward, uniform, LstmState, LstmWeights};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

const DATASET_INIT_BOUND: f64 = 0.1;

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Index of every named tensor in the parameter store.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    conv: Vec<(usize, usize, usize)>,
    arch_embed: usize,
    enc_w: usize,
    enc_b: usize,
    dec_embed: usize,
    dec_w: usize,
    dec_b: usize,
    att_query: usize,
    att_key: usize,
    att_v: usize,
    out_w: usize,
    out_b: usize,
    dataset_embed: usize,
    comb_w: usize,
    comb_b: usize,
    score_w: usize,
    score_b: usize,
    perf_w: usize,
    perf_b: usize,
}

impl Layout {
    fn from_store(store: &ParamStore, config: &ModelConfig) -> Result<Self> {
        let at = |name: &str| {
            store
                .index_of(name)
                .ok_or_else(|| RankerError::Checkpoint(format!("missing parameter {name:?}")))
        };
        let conv = match config.curve_encoder {
            CurveEncoderVariant::ConvGlobalMax => config
                .curve_kernel_sizes
                .iter()
                .map(|&k| Ok((k, at(&format!("curve.conv{k}.kernel"))?, at(&format!("curve.conv{k}.bias"))?)))
                .collect::<Result<_>>()?,
            CurveEncoderVariant::BestValueOnly => Vec::new(),
        };
        Ok(Layout {
            conv,
            arch_embed: at("arch.embed")?,
            enc_w: at("arch.encoder.weight")?,
            enc_b: at("arch.encoder.bias")?,
            dec_embed: at("decoder.embed")?,
            dec_w: at("decoder.weight")?,
            dec_b: at("decoder.bias")?,
            att_query: at("decoder.attention.query")?,
            att_key: at("decoder.attention.key")?,
            att_v: at("decoder.attention.v")?,
            out_w: at("decoder.out.weight")?,
            out_b: at("decoder.out.bias")?,
            dataset_embed: at("dataset.embed")?,
            comb_w: at("combiner.weight")?,
            comb_b: at("combiner.bias")?,
            score_w: at("score.weight")?,
            score_b: at("score.bias")?,
            perf_w: at("perf.weight")?,
            perf_b: at("perf.bias")?,
        })
    }
}

/// All learnable tensors of one ranking model plus the dataset id map.
#[derive(Debug, Clone, PartialEq)]
pub struct RankerParams {
    store: ParamStore,
    dataset_ids: Vec<String>,
    layout: Layout,
}

impl RankerParams {
    pub fn init(
        config: &ModelConfig,
        vocab_size: usize,
        hparam_dim: usize,
        dataset_ids: &[String],
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(RankerError::Config("empty vocabulary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (e, h, f) = (config.arch_embed_dim, config.arch_hidden_dim, config.filters_per_kernel);
        let v = vocab_size;
        let mut s = ParamStore::new();
        if config.curve_encoder == CurveEncoderVariant::ConvGlobalMax {
            for &k in &config.curve_kernel_sizes {
                s.push(format!("curve.conv{k}.kernel"), glorot_uniform(&mut rng, &[k, 1, f], k, f)?);
                s.push(format!("curve.conv{k}.bias"), Tensor::zeros(&[f])?);
            }
        }
        s.push("arch.embed", glorot_uniform(&mut rng, &[v, e], v, e)?);
        s.push("arch.encoder.weight", glorot_uniform(&mut rng, &[e + h, 4 * h], e + h, 4 * h)?);
        s.push("arch.encoder.bias", forget_bias(h)?);
        s.push("decoder.embed", glorot_uniform(&mut rng, &[v + 1, e], v + 1, e)?);
        s.push("decoder.weight", glorot_uniform(&mut rng, &[e + 2 * h, 4 * h], e + 2 * h, 4 * h)?);
        s.push("decoder.bias", forget_bias(h)?);
        s.push("decoder.attention.query", glorot_uniform(&mut rng, &[h, h], h, h)?);
        s.push("decoder.attention.key", glorot_uniform(&mut rng, &[h, h], h, h)?);
        s.push("decoder.attention.v", glorot_uniform(&mut rng, &[h, 1], h, 1)?);
        s.push("decoder.out.weight", glorot_uniform(&mut rng, &[2 * h, v], 2 * h, v)?);
        s.push("decoder.out.bias", Tensor::zeros(&[v])?);
        let d = config.dataset_embed_dim;
        let mut rows = Vec::with_capacity(dataset_ids.len().max(1) * d);
        for id in dataset_ids {
            rows.extend(dataset_row(seed, id, d)?);
        }
        if dataset_ids.is_empty() {
            rows.extend(dataset_row(seed, "", d)?);
        }
        s.push("dataset.embed", Tensor::new(&[dataset_ids.len().max(1), d], rows)?);
        let width = config.curve_width() + h + d + hparam_dim;
        let hid = config.combiner_hidden;
        s.push("combiner.weight", glorot_uniform(&mut rng, &[width, hid], width, hid)?);
        s.push("combiner.bias", Tensor::zeros(&[hid])?);
        s.push("score.weight", glorot_uniform(&mut rng, &[hid, 1], hid, 1)?);
        s.push("score.bias", Tensor::zeros(&[1])?);
        s.push("perf.weight", glorot_uniform(&mut rng, &[hid, 1], hid, 1)?);
        s.push("perf.bias", Tensor::zeros(&[1])?);
        let layout = Layout::from_store(&s, config)?;
        Ok(RankerParams {
            store: s,
            dataset_ids: dataset_ids.to_vec(),
            layout,
        })
    }

    pub(crate) fn from_parts(config: &ModelConfig, store: ParamStore, dataset_ids: Vec<String>) -> Result<Self> {
        let layout = Layout::from_store(&store, config)?;
        let rows = store.get(layout.dataset_embed).shape()[0];
        if rows != dataset_ids.len().max(1) {
            return Err(RankerError::Checkpoint(format!(
                "dataset table has {rows} rows for {} ids",
                dataset_ids.len()
            )));
        }
        Ok(RankerParams {
            store,
            dataset_ids,
            layout,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn dataset_ids(&self) -> &[String] {
        &self.dataset_ids
    }

    pub fn dataset_index(&self, id: &str) -> Option<usize> {
        self.dataset_ids.iter().position(|d| d == id)
    }

    /// Row of `id` in the dataset table, allocating a freshly initialized
    /// row (seeded by `seed` and the id) when the id is new.
    pub fn ensure_dataset(&mut self, id: &str, seed: u64) -> Result<usize> {
        if let Some(i) = self.dataset_index(id) {
            return Ok(i);
        }
        let idx = self.layout.dataset_embed;
        let table = self.store.get(idx);
        let d = table.shape()[1];
        let row = dataset_row(seed, id, d)?;
        let new = if self.dataset_ids.is_empty() {
            Tensor::new(&[1, d], row)?
        } else {
            let mut data = table.data().to_vec();
            data.extend(row);
            Tensor::new(&[self.dataset_ids.len() + 1, d], data)?
        };
        self.store.replace(idx, new);
        self.dataset_ids.push(id.to_string());
        Ok(self.dataset_ids.len() - 1)
    }

    pub fn dataset_embedding(&self, id: &str) -> Option<&[f64]> {
        let i = self.dataset_index(id)?;
        let t = self.store.get(self.layout.dataset_embed);
        let d = t.shape()[1];
        Some(&t.data()[i * d..(i + 1) * d])
    }
}

fn forget_bias(h: usize) -> Result<Tensor> {
    let mut b = vec![0.0; 4 * h];
    b[h..2 * h].iter_mut().for_each(|x| *x = 1.0);
    Ok(Tensor::new(&[4 * h], b)?)
}

fn dataset_row(seed: u64, id: &str, d: usize) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(id));
    Ok(uniform(&mut rng, &[d], DATASET_INIT_BOUND)?.into_data())
}

/// Graph nodes produced by one batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// `[n, 1]` ranking scores.
    pub scores: Var,
    /// `[n, 1]` raw final-performance predictions.
    pub perf: Var,
    /// Mean per-token reconstruction cross-entropy, when requested.
    pub rec_loss: Option<Var>,
    pub rec_correct: usize,
    pub rec_total: usize,
}

/// Concatenates per-group blocks and restores the original row order.
fn regroup(g: &Graph, blocks: Vec<Var>, order: &[usize]) -> Result<Var> {
    let stacked = if blocks.len() == 1 { blocks[0] } else { g.concat(&blocks, 0)? };
    if order.iter().enumerate().all(|(i, &o)| i == o) {
        return Ok(stacked);
    }
    let mut inverse = vec![0; order.len()];
    for (pos, &row) in order.iter().enumerate() {
        inverse[row] = pos;
    }
    Ok(g.gather_rows(stacked, &inverse)?)
}

fn group_by<K: Ord>(n: usize, key: impl Fn(usize) -> K) -> BTreeMap<K, Vec<usize>> {
    let mut groups: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        groups.entry(key(i)).or_default().push(i);
    }
    groups
}

/// A trained (or freshly initialized) model `f_l` with its input transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranker {
    pub config: ModelConfig,
    pub features: FeatureSpace,
    pub params: RankerParams,
    /// Curve length the model was trained for.
    pub length: usize,
    pub seed: u64,
}

impl Ranker {
    pub fn new(config: ModelConfig, features: FeatureSpace, dataset_ids: &[String], length: usize, seed: u64) -> Result<Self> {
        let params = RankerParams::init(&config, features.vocabulary.len(), features.hparam_dim(), dataset_ids, seed)?;
        Ok(Ranker {
            config,
            features,
            params,
            length,
            seed,
        })
    }

    pub fn ensure_dataset(&mut self, id: &str) -> Result<usize> {
        self.params.ensure_dataset(id, self.seed)
    }

    fn dataset_rows(&self, inputs: &[&EncodedInput]) -> Result<Vec<usize>> {
        inputs
            .iter()
            .map(|x| {
                self.params
                    .dataset_index(&x.dataset_id)
                    .ok_or_else(|| CorpusError::UnknownDataset(x.dataset_id.clone()).into())
            })
            .collect()
    }

    fn curve_block(&self, g: &Graph, vars: &[Var], inputs: &[&EncodedInput], rows: &[usize], l: usize) -> Result<Var> {
        let n = rows.len();
        match self.config.curve_encoder {
            CurveEncoderVariant::BestValueOnly => {
                let best = rows.iter().map(|&r| inputs[r].best_value()).collect();
                Ok(g.constant(Tensor::new(&[n, 1], best)?))
            }
            CurveEncoderVariant::ConvGlobalMax => {
                let f = self.config.filters_per_kernel;
                if l == 0 {
                    return Ok(g.constant(Tensor::zeros(&[n, self.config.curve_width()])?));
                }
                let mut data = Vec::with_capacity(n * l);
                for &r in rows {
                    data.extend_from_slice(&inputs[r].curve);
                }
                let signal = g.constant(Tensor::new(&[n, l, 1], data)?);
                let mut parts = Vec::with_capacity(self.params.layout.conv.len());
                for &(k, kern, bias) in &self.params.layout.conv {
                    if k > l {
                        parts.push(g.constant(Tensor::zeros(&[n, f])?));
                    } else {
                        let c = g.conv1d_valid(signal, vars[kern], vars[bias])?;
                        parts.push(g.global_max_pool(c)?);
                    }
                }
                Ok(g.concat(&parts, 1)?)
            }
        }
    }

    /// Encodes architectures of equal token length. Rows below `rec_limit`
    /// are also decoded, accumulating summed reconstruction log-likelihoods
    /// and hit counts into `rec`.
    fn arch_block(
        &self,
        g: &Graph,
        vars: &[Var],
        inputs: &[&EncodedInput],
        rows: &[usize],
        rec_limit: usize,
        rec: &mut (Vec<Var>, usize, usize),
    ) -> Result<Var> {
        let lay = &self.params.layout;
        let h = self.config.arch_hidden_dim;
        let n = rows.len();
        let steps = inputs[rows[0]].tokens.len();
        let column = |t: usize| -> Vec<usize> { rows.iter().map(|&r| inputs[r].tokens[t]).collect() };
        let embedded = (0..steps)
            .map(|t| Ok(g.gather_rows(vars[lay.arch_embed], &column(t))?))
            .collect::<Result<Vec<_>>>()?;
        let encoder = LstmWeights {
            weight: vars[lay.enc_w],
            bias: vars[lay.enc_b],
            hidden: h,
        };
        let (outputs, last) = lstm_forward(g, &embedded, &encoder, None)?;
        let picked: Vec<usize> = (0..n).filter(|&i| rows[i] < rec_limit).collect();
        if picked.is_empty() {
            return Ok(last.h);
        }
        let encoded_h = last.h;
        let (rows, outputs, last): (Vec<usize>, Vec<Var>, _) = if picked.len() == n {
            (rows.to_vec(), outputs, last)
        } else {
            let sub = |v: Var| g.gather_rows(v, &picked);
            (
                picked.iter().map(|&i| rows[i]).collect(),
                outputs.into_iter().map(sub).collect::<std::result::Result<_, _>>()?,
                LstmState {
                    h: sub(last.h)?,
                    c: sub(last.c)?,
                },
            )
        };
        let rows = &rows[..];
        let n = rows.len();
        let column = |t: usize| -> Vec<usize> { rows.iter().map(|&r| inputs[r].tokens[t]).collect() };
        let acc = rec;

        let v = self.features.vocabulary.len();
        let stacked = outputs
            .iter()
            .map(|&o| Ok(g.reshape(o, &[n, 1, h])?))
            .collect::<Result<Vec<_>>>()?;
        let memory = if steps == 1 { stacked[0] } else { g.concat(&stacked, 1)? };
        let keys = g.matmul(memory, vars[lay.att_key])?;
        let decoder = LstmWeights {
            weight: vars[lay.dec_w],
            bias: vars[lay.dec_b],
            hidden: h,
        };
        let mut state = last;
        for t in 0..steps {
            let prev = if t == 0 { vec![v; n] } else { column(t - 1) };
            let emb = g.gather_rows(vars[lay.dec_embed], &prev)?;
            let q = g.reshape(g.matmul(state.h, vars[lay.att_query])?, &[n, 1, h])?;
            let energy = g.tanh(g.add(keys, q)?);
            let logits = g.reshape(g.matmul(energy, vars[lay.att_v])?, &[n, steps])?;
            let weights = g.reshape(g.softmax(logits)?, &[n, steps, 1])?;
            let context = g.sum_axis(g.mul(weights, memory)?, 1)?;
            state = decoder.step(g, g.concat(&[emb, context], 1)?, state)?;
            let out = g.concat(&[state.h, context], 1)?;
            let token_logits = dense(g, out, vars[lay.out_w], vars[lay.out_b])?;
            let target = column(t);
            {
                let lv = g.value(token_logits);
                for (row, &want) in lv.data().chunks(v).zip(&target) {
                    let mut best = 0;
                    for (i, &x) in row.iter().enumerate() {
                        if x > row[best] {
                            best = i;
                        }
                    }
                    acc.1 += usize::from(best == want);
                }
            }
            let mut onehot = vec![0.0; n * v];
            for (i, &want) in target.iter().enumerate() {
                onehot[i * v + want] = 1.0;
            }
            let picked = g.mul(g.log_softmax(token_logits)?, g.constant(Tensor::new(&[n, v], onehot)?))?;
            acc.0.push(g.reshape(g.sum(picked), &[1])?);
            acc.2 += n;
        }
        Ok(encoded_h)
    }

    /// Batched forward pass over `inputs` using parameter nodes `vars`. The
    /// first `rec_limit` inputs also contribute to the reconstruction loss.
    pub fn forward(&self, g: &Graph, vars: &[Var], inputs: &[&EncodedInput], rec_limit: usize) -> Result<Forward> {
        let n = inputs.len();
        if n == 0 {
            return Err(crate::tensor::TensorError::Empty("forward").into());
        }
        let lay = &self.params.layout;

        let by_len = group_by(n, |i| inputs[i].curve.len());
        let mut blocks = Vec::new();
        let mut order = Vec::with_capacity(n);
        for (&l, rows) in &by_len {
            blocks.push(self.curve_block(g, vars, inputs, rows, l)?);
            order.extend_from_slice(rows);
        }
        let curve = regroup(g, blocks, &order)?;

        let by_tokens = group_by(n, |i| inputs[i].tokens.len());
        let mut blocks = Vec::new();
        let mut order = Vec::with_capacity(n);
        let mut rec = (Vec::new(), 0, 0);
        for (&t, rows) in &by_tokens {
            if t == 0 {
                return Err(crate::tensor::TensorError::Empty("architecture tokens").into());
            }
            blocks.push(self.arch_block(g, vars, inputs, rows, rec_limit, &mut rec)?);
            order.extend_from_slice(rows);
        }
        let arch = regroup(g, blocks, &order)?;

        let dataset = g.gather_rows(vars[lay.dataset_embed], &self.dataset_rows(inputs)?)?;
        let mut parts = vec![curve, arch, dataset];
        let hd = self.features.hparam_dim();
        if hd > 0 {
            let mut hp = Vec::with_capacity(n * hd);
            for x in inputs {
                if x.hparams.len() != hd {
                    return Err(crate::tensor::TensorError::ShapeMismatch {
                        op: "hparams",
                        lhs: vec![hd],
                        rhs: vec![x.hparams.len()],
                    }
                    .into());
                }
                hp.extend_from_slice(&x.hparams);
            }
            parts.push(g.constant(Tensor::new(&[n, hd], hp)?));
        }
        let joined = g.concat(&parts, 1)?;
        let hidden = g.tanh(dense(g, joined, vars[lay.comb_w], vars[lay.comb_b])?);
        let scores = dense(g, hidden, vars[lay.score_w], vars[lay.score_b])?;
        let perf = dense(g, hidden, vars[lay.perf_w], vars[lay.perf_b])?;

        let rec_loss = if rec.2 > 0 {
            let (sums, _, total) = &rec;
            let all = g.sum(if sums.len() == 1 { sums[0] } else { g.concat(sums, 0)? });
            Some(g.scale(all, -1.0 / *total as f64))
        } else {
            None
        };
        Ok(Forward {
            scores,
            perf,
            rec_loss,
            rec_correct: rec.1,
            rec_total: rec.2,
        })
    }

    fn constants(&self, g: &Graph) -> Vec<Var> {
        self.params.store.tensors().iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Scores `f(x)` and raw final-performance outputs for each input.
    pub fn evaluate(&self, inputs: &[EncodedInput]) -> Result<(Vec<f64>, Vec<f64>)> {
        let g = Graph::new();
        let vars = self.constants(&g);
        let refs: Vec<&EncodedInput> = inputs.iter().collect();
        let fwd = self.forward(&g, &vars, &refs, 0)?;
        let scores = g.value(fwd.scores).data().to_vec();
        let perf = g.value(fwd.perf).data().to_vec();
        Ok((scores, perf))
    }

    pub fn scores(&self, inputs: &[EncodedInput]) -> Result<Vec<f64>> {
        Ok(self.evaluate(inputs)?.0)
    }

    pub fn score(&self, input: &EncodedInput) -> Result<f64> {
        Ok(self.scores(std::slice::from_ref(input))?[0])
    }

    /// Final-performance estimate for a partially observed run, clamped by
    /// its best observed value and the mean of `completed_finals`.
    pub fn predict_final(&self, input: &EncodedInput, completed_finals: &[f64]) -> Result<f64> {
        let raw = self.evaluate(std::slice::from_ref(input))?.1[0];
        Ok(super::predict_final(raw, input.best_value(), completed_finals))
    }

    /// Teacher-forced token accuracy and mean reconstruction loss.
    pub fn reconstruction(&self, inputs: &[EncodedInput]) -> Result<(f64, f64)> {
        let g = Graph::new();
        let vars = self.constants(&g);
        let refs: Vec<&EncodedInput> = inputs.iter().collect();
        let fwd = self.forward(&g, &vars, &refs, refs.len())?;
        let loss = g.scalar(fwd.rec_loss.expect("requested"));
        Ok((fwd.rec_correct as f64 / fwd.rec_total as f64, loss))
    }
}
