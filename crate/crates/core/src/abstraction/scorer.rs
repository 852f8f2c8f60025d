//! Permutation-equivariant rival scorer with hand-written backpropagation.
//!
//! Each rival's standardized features are embedded, passed through two
//! layers `h ← tanh(W h + U mean(h) + c)` that mix every rival with the pooled
//! context, and read out by two heads: `softplus` for the sum score and `exp`
//! for the (unnormalized) average score.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{rival_features, schema_hash, Features, FEATURE_NAMES, N_FEATURES};
use super::RivalScores;
use crate::error::{Error, Result};
use crate::market::Market;

pub const DEFAULT_WIDTH: usize = 32;
pub const MODEL_FORMAT_VERSION: u32 = 1;
const LAYERS: usize = 2;

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    width: usize,
    embed_w: usize,
    embed_b: usize,
    /// Per layer: `W`, `U`, `c`.
    layers: [(usize, usize, usize); LAYERS],
    sum_w: usize,
    sum_b: usize,
    avg_w: usize,
    avg_b: usize,
    len: usize,
}

impl Layout {
    fn new(width: usize) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let start = at;
            at += n;
            start
        };
        let embed_w = take(width * N_FEATURES);
        let embed_b = take(width);
        let mut layers = [(0, 0, 0); LAYERS];
        for layer in &mut layers {
            *layer = (take(width * width), take(width * width), take(width));
        }
        let sum_w = take(width);
        let sum_b = take(1);
        let avg_w = take(width);
        let avg_b = take(1);
        Layout {
            width,
            embed_w,
            embed_b,
            layers,
            sum_w,
            sum_b,
            avg_w,
            avg_b,
            len: at,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerModel {
    width: usize,
    params: Vec<f64>,
}

/// On-disk representation.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    schema_hash: String,
    feature_names: Vec<String>,
    width: usize,
    params: Vec<f64>,
}

/// Activations kept for the backward pass.
pub(crate) struct Trace {
    inputs: Vec<Features>,
    /// `hidden[0]` is the embedding, `hidden[l + 1]` the output of layer `l`.
    hidden: Vec<Vec<Vec<f64>>>,
    means: Vec<Vec<f64>>,
    sum_pre: Vec<f64>,
    pub(crate) scores: RivalScores,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mean_rows(rows: &[Vec<f64>], width: usize) -> Vec<f64> {
    let mut m = vec![0.0; width];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    let k = rows.len().max(1) as f64;
    m.iter_mut().for_each(|v| *v /= k);
    m
}

fn check_finite(values: &[f64], layer: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite activation in {layer}")))
    }
}

impl ScorerModel {
    /// Xavier-uniform weights from `seed`, zero biases, zero head weights; the
    /// head biases make every initial score 1.
    pub fn new(seed: u64) -> Self {
        ScorerModel::with_width(seed, DEFAULT_WIDTH)
    }

    pub fn with_width(seed: u64, width: usize) -> Self {
        let layout = Layout::new(width);
        let mut params = vec![0.0; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |start: usize, fan_in: usize, fan_out: usize, params: &mut [f64]| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut params[start..start + fan_in * fan_out] {
                *v = limit * (2.0 * rng.random::<f64>() - 1.0);
            }
        };
        fill(layout.embed_w, N_FEATURES, width, &mut params);
        for &(w, u, _) in &layout.layers {
            fill(w, width, width, &mut params);
            fill(u, width, width, &mut params);
        }
        params[layout.sum_b] = (std::f64::consts::E - 1.0).ln();
        params[layout.avg_b] = 0.0;
        ScorerModel { width, params }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn layout(&self) -> Layout {
        Layout::new(self.width)
    }

    pub fn score(&self, market: &Market) -> Result<RivalScores> {
        Ok(self.forward(&rival_features(market))?.scores)
    }

    pub(crate) fn forward(&self, inputs: &[Features]) -> Result<Trace> {
        let lay = self.layout();
        let w = lay.width;
        let p = &self.params;
        let embed: Vec<Vec<f64>> = inputs
            .iter()
            .map(|x| {
                (0..w)
                    .map(|k| {
                        let row = &p[lay.embed_w + k * N_FEATURES..lay.embed_w + (k + 1) * N_FEATURES];
                        let z: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + p[lay.embed_b + k];
                        z.tanh()
                    })
                    .collect()
            })
            .collect();
        for h in &embed {
            check_finite(h, "embedding")?;
        }
        let mut hidden = vec![embed];
        let mut means = Vec::with_capacity(LAYERS);
        for (l, &(wo, uo, co)) in lay.layers.iter().enumerate() {
            let prev = &hidden[l];
            let mean = mean_rows(prev, w);
            let ctx: Vec<f64> = (0..w)
                .map(|k| p[uo + k * w..uo + (k + 1) * w].iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>() + p[co + k])
                .collect();
            let next: Vec<Vec<f64>> = prev
                .iter()
                .map(|h| {
                    (0..w)
                        .map(|k| {
                            let z: f64 = p[wo + k * w..wo + (k + 1) * w].iter().zip(h).map(|(a, b)| a * b).sum();
                            (z + ctx[k]).tanh()
                        })
                        .collect()
                })
                .collect();
            for h in &next {
                check_finite(h, &format!("interaction layer {}", l + 1))?;
            }
            means.push(mean);
            hidden.push(next);
        }
        let last = &hidden[LAYERS];
        let dot = |off: usize, h: &[f64]| p[off..off + w].iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
        let sum_pre: Vec<f64> = last.iter().map(|h| dot(lay.sum_w, h) + p[lay.sum_b]).collect();
        let avg: Vec<f64> = last.iter().map(|h| (dot(lay.avg_w, h) + p[lay.avg_b]).exp()).collect();
        let sum: Vec<f64> = sum_pre.iter().map(|&z| softplus(z)).collect();
        check_finite(&sum, "sum head")?;
        check_finite(&avg, "avg head")?;
        Ok(Trace {
            inputs: inputs.to_vec(),
            hidden,
            means,
            sum_pre,
            scores: RivalScores {
                sum_scores: sum,
                avg_scores: avg,
            },
        })
    }

    /// Gradient of a loss with respect to all parameters, given the loss's
    /// partial derivatives with respect to each rival's two scores.
    pub(crate) fn backward(&self, trace: &Trace, d_sum: &[f64], d_avg: &[f64]) -> Vec<f64> {
        let lay = self.layout();
        let w = lay.width;
        let p = &self.params;
        let mut g = vec![0.0; p.len()];
        let r = trace.inputs.len();
        let last = &trace.hidden[LAYERS];
        let mut dh: Vec<Vec<f64>> = vec![vec![0.0; w]; r];
        for q in 0..r {
            let gs = d_sum[q] * sigmoid(trace.sum_pre[q]);
            let ga = d_avg[q] * trace.scores.avg_scores[q];
            g[lay.sum_b] += gs;
            g[lay.avg_b] += ga;
            for k in 0..w {
                g[lay.sum_w + k] += gs * last[q][k];
                g[lay.avg_w + k] += ga * last[q][k];
                dh[q][k] = gs * p[lay.sum_w + k] + ga * p[lay.avg_w + k];
            }
        }
        for l in (0..LAYERS).rev() {
            let (wo, uo, co) = lay.layers[l];
            let out = &trace.hidden[l + 1];
            let inp = &trace.hidden[l];
            let mean = &trace.means[l];
            let dz: Vec<Vec<f64>> = (0..r)
                .map(|q| (0..w).map(|k| dh[q][k] * (1.0 - out[q][k] * out[q][k])).collect())
                .collect();
            let mut dz_total = vec![0.0; w];
            for q in 0..r {
                for k in 0..w {
                    let d = dz[q][k];
                    if d == 0.0 {
                        continue;
                    }
                    dz_total[k] += d;
                    g[co + k] += d;
                    for c in 0..w {
                        g[wo + k * w + c] += d * inp[q][c];
                        g[uo + k * w + c] += d * mean[c];
                    }
                }
            }
            // Context term: every rival receives (1/R) Uᵀ Σ_q dz_q.
            let inv_r = 1.0 / r as f64;
            let mut pooled = vec![0.0; w];
            for k in 0..w {
                for c in 0..w {
                    pooled[c] += p[uo + k * w + c] * dz_total[k] * inv_r;
                }
            }
            for q in 0..r {
                for c in 0..w {
                    dh[q][c] = pooled[c] + (0..w).map(|k| p[wo + k * w + c] * dz[q][k]).sum::<f64>();
                }
            }
        }
        let embed = &trace.hidden[0];
        for q in 0..r {
            for k in 0..w {
                let d = dh[q][k] * (1.0 - embed[q][k] * embed[q][k]);
                g[lay.embed_b + k] += d;
                for (c, x) in trace.inputs[q].iter().enumerate() {
                    g[lay.embed_w + k * N_FEATURES + c] += d * x;
                }
            }
        }
        g
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            schema_hash: schema_hash(),
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            width: self.width,
            params: self.params.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Parses a model file, refusing corrupt files and files written for a
    /// different feature schema.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::ModelFile(format!("cannot parse: {e}")))?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::ModelFile(format!(
                "format version {} is not supported (expected {MODEL_FORMAT_VERSION})",
                file.format_version
            )));
        }
        let expected = schema_hash();
        if file.schema_hash != expected {
            return Err(Error::SchemaMismatch {
                expected,
                found: file.schema_hash,
            });
        }
        if file.width == 0 {
            return Err(Error::ModelFile("width must be > 0".into()));
        }
        let want = Layout::new(file.width).len;
        if file.params.len() != want {
            return Err(Error::ModelFile(format!(
                "{} parameters for width {} (expected {want})",
                file.params.len(),
                file.width
            )));
        }
        if file.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::ModelFile("non-finite parameter".into()));
        }
        Ok(ScorerModel {
            width: file.width,
            params: file.params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ScorerModel::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{synth_market, AttributeRanges};

    fn perturbed(seed: u64) -> ScorerModel {
        let mut model = ScorerModel::new(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for v in model.params_mut() {
            *v += 0.3 * (2.0 * rng.random::<f64>() - 1.0);
        }
        model
    }

    #[test]
    fn parameter_count() {
        assert_eq!(ScorerModel::new(0).n_params(), 4546);
    }

    #[test]
    fn fresh_model_scores_are_uniform() {
        let m = synth_market(1, 3, 6, &AttributeRanges::default()).unwrap();
        let s = ScorerModel::new(7).score(&m).unwrap();
        for (a, b) in s.sum_scores.iter().zip(&s.avg_scores) {
            assert!((a - 1.0).abs() < 1e-12);
            assert_eq!(*b, 1.0);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let m = synth_market(2, 3, 6, &AttributeRanges::default()).unwrap();
        let x = rival_features(&m);
        let model = perturbed(3);
        let weights_s: Vec<f64> = (0..x.len()).map(|q| 0.3 + q as f64 * 0.1).collect();
        let weights_a: Vec<f64> = (0..x.len()).map(|q| 0.7 - q as f64 * 0.2).collect();
        let loss = |model: &ScorerModel| {
            let s = model.forward(&x).unwrap().scores;
            s.sum_scores.iter().zip(&weights_s).map(|(a, b)| a * b).sum::<f64>()
                + s.avg_scores.iter().zip(&weights_a).map(|(a, b)| a * b).sum::<f64>()
        };
        let grad = model.backward(&model.forward(&x).unwrap(), &weights_s, &weights_a);
        let h = 1e-6;
        for k in (0..model.n_params()).step_by(97) {
            let mut up = model.clone();
            up.params[k] += h;
            let mut dn = model.clone();
            dn.params[k] -= h;
            let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
            assert!((fd - grad[k]).abs() <= 1e-6 * fd.abs().max(1.0), "param {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn round_trip_and_refusals() {
        let model = perturbed(5);
        let text = model.to_json().unwrap();
        assert_eq!(ScorerModel::from_json(&text).unwrap(), model);
        assert!(matches!(ScorerModel::from_json("{not json"), Err(Error::ModelFile(_))));
        let wrong = text.replace(&schema_hash(), "deadbeef");
        assert!(matches!(ScorerModel::from_json(&wrong), Err(Error::SchemaMismatch { .. })));
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["params"].as_array_mut().unwrap().pop();
        assert!(matches!(ScorerModel::from_json(&v.to_string()), Err(Error::ModelFile(_))));
    }
}
