//! Whole-network inference: layer-by-layer execution of a bundle through the
//! dataflow and the macro, and the exact integer reference forward pass.
//!
//! Between layers the runtime only moves data: outputs of `r_out` bits are
//! realigned to the next layer's `r_in` by dropping (or appending) LSBs,
//! optional 2×2 pooling is applied, and conv maps feeding an fc layer are
//! flattened in height-width-channel order. Channel-split passes are summed
//! around the mid code, `clamp(Σ (code_p − 2^{r−1}) + 2^{r−1})`, with the
//! layer's beta applied in the first pass only.

use rayon::prelude::*;

use crate::bundle::{LayerRecord, ModelBundle, Pool};
use crate::dataflow::{
    flip_msb, gather_kernel, simulate_layer, LayerConfig, LayerKind, PipelineConfig, Tensor3,
};
use crate::energy::EnergyLedger;
use crate::engine::{CimCycleInput, MacroInstance};
use crate::error::{config, Result};
use crate::mapping::{plan_mapping, LayerMapping, MappingPlan};
use crate::rng::{domain, key};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRollup {
    pub layer: usize,
    pub passes: usize,
    pub cycles: u64,
    pub closed_form_cycles: u64,
    pub saturated: usize,
    pub energy: EnergyLedger,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub scores: Vec<u32>,
    pub prediction: usize,
    pub reference_prediction: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkReport {
    pub images: Vec<ImageResult>,
    pub accuracy: Option<f64>,
    pub reference_accuracy: Option<f64>,
    /// Summed over images.
    pub layers: Vec<LayerRollup>,
}

/// Index of the first maximal score.
pub fn argmax(scores: &[u32]) -> usize {
    scores.iter().enumerate().fold(0, |best, (i, s)| if *s > scores[best] { i } else { best })
}

fn realign(t: &Tensor3, from: u32, to: u32) -> Tensor3 {
    let data = t
        .data
        .iter()
        .map(|v| if from >= to { v >> (from - to) } else { v << (to - from) })
        .collect();
    Tensor3 { data, ..*t }
}

fn pool(t: &Tensor3, p: Pool, layer: &LayerConfig) -> Tensor3 {
    if p == Pool::None {
        return t.clone();
    }
    let (h, w) = (t.h / 2, t.w / 2);
    let mut out = Tensor3::zeros(h, w, t.c);
    // pool in offset binary so that ordering is numeric
    let conv = |v: u32| if layer.signed_output { flip_msb(v, layer.r_out) } else { v };
    for y in 0..h {
        for x in 0..w {
            for c in 0..t.c {
                let vals = [
                    conv(t.get(2 * y, 2 * x, c)),
                    conv(t.get(2 * y, 2 * x + 1, c)),
                    conv(t.get(2 * y + 1, 2 * x, c)),
                    conv(t.get(2 * y + 1, 2 * x + 1, c)),
                ];
                let v = match p {
                    Pool::Max2 => *vals.iter().max().unwrap(),
                    Pool::Avg2 => vals.iter().sum::<u32>() / 4,
                    Pool::None => unreachable!(),
                };
                out.set(y, x, c, conv(v));
            }
        }
    }
    out
}

/// Prepares the output of layer `i` as the input of layer `i + 1`.
fn between_layers(t: &Tensor3, rec: &LayerRecord, next: Option<&LayerRecord>) -> Result<Tensor3> {
    let pooled = pool(t, rec.pool, &rec.cfg);
    let Some(next) = next else { return Ok(pooled) };
    let mut x = realign(&pooled, rec.cfg.r_out, next.cfg.r_in);
    if next.cfg.kind == LayerKind::Fc {
        x = Tensor3 { h: 1, w: 1, c: x.data.len(), data: x.data };
    }
    if x.c != next.cfg.c_in {
        return config(format!("layer produces {} channels, next layer expects {}", x.c, next.cfg.c_in));
    }
    Ok(x)
}

fn channel_slice(t: &Tensor3, c0: usize, c1: usize) -> Tensor3 {
    let mut out = Tensor3::zeros(t.h, t.w, c1 - c0);
    for y in 0..t.h {
        for x in 0..t.w {
            for c in c0..c1 {
                out.set(y, x, c - c0, t.get(y, x, c));
            }
        }
    }
    out
}

fn pass_weights(rec: &LayerRecord, lm: &LayerMapping, s: usize, b: usize) -> Vec<Vec<u32>> {
    let (c0, c1) = lm.channel_splits[s];
    let (o0, o1) = lm.column_batches[b];
    let c_in = rec.cfg.c_in;
    (o0..o1)
        .map(|o| {
            (0..rec.cfg.k).flat_map(|t| (c0..c1).map(move |c| t * c_in + c)).map(|r| rec.weights[o][r]).collect()
        })
        .collect()
}

/// Runs one full layer; `exec` evaluates one single-pass sub-layer.
fn run_layer(
    rec: &LayerRecord,
    lm: &LayerMapping,
    input: &Tensor3,
    mut exec: impl FnMut(&LayerConfig, &Tensor3, &[Vec<u32>], usize) -> Result<Tensor3>,
) -> Result<Tensor3> {
    let cfg = &rec.cfg;
    let (h, w) = cfg.output_dims(input.h, input.w);
    let mid = 1i64 << (cfg.r_out - 1);
    let max = (1i64 << cfg.r_out) - 1;
    let mut acc: Vec<i64> = vec![0; h * w * cfg.c_out];
    let mut pass = 0;
    for s in 0..lm.channel_splits.len() {
        let (c0, c1) = lm.channel_splits[s];
        let x = if lm.channel_splits.len() == 1 { input.clone() } else { channel_slice(input, c0, c1) };
        for b in 0..lm.column_batches.len() {
            let sub = lm.sub_layer(cfg, s, b);
            let out = exec(&sub, &x, &pass_weights(rec, lm, s, b), pass)?;
            pass += 1;
            let (o0, _) = lm.column_batches[b];
            for p in 0..h * w {
                for o in 0..sub.c_out {
                    let mut v = out.data[p * sub.c_out + o];
                    if cfg.signed_output {
                        v = flip_msb(v, cfg.r_out);
                    }
                    acc[p * cfg.c_out + o0 + o] += v as i64 - mid;
                }
            }
        }
    }
    let data = acc
        .into_iter()
        .map(|a| {
            let v = (a + mid).clamp(0, max) as u32;
            if cfg.signed_output {
                flip_msb(v, cfg.r_out)
            } else {
                v
            }
        })
        .collect();
    Tensor3::from_vec(h, w, cfg.c_out, data)
}

/// Per-pixel exact evaluation of one single-pass layer.
fn oracle_layer<T: Scalar>(sub: &LayerConfig, x: &Tensor3, m: &MacroInstance<T>) -> Result<Tensor3> {
    let (h, w) = sub.output_dims(x.h, x.w);
    let mut out = Tensor3::zeros(h, w, sub.c_out);
    for p in 0..h * w {
        let (rows, _) = gather_kernel(sub, x, p / w, p % w);
        let input = CimCycleInput {
            inputs: rows,
            r_in: sub.r_in,
            r_w: sub.r_w,
            r_out: sub.r_out,
            gamma: sub.gamma,
            n_outputs: sub.c_out,
            beta: sub.beta.clone(),
        };
        for (o, c) in m.integer_oracle(&input)?.iter().enumerate() {
            let v = if sub.signed_output { flip_msb(c.code, sub.r_out) } else { c.code };
            out.set(p / w, p % w, o, v);
        }
    }
    Ok(out)
}

/// The exact integer forward pass: every layer output, evaluated with the
/// rational oracle of the ideal transfer chain. `reference` must be built
/// from the same macro configuration as the instance it is compared with;
/// its calibration and beta trims are taken into account.
pub fn reference_forward<T: Scalar>(
    bundle: &ModelBundle,
    plan: &MappingPlan,
    image: &Tensor3,
    reference: &MacroInstance<T>,
) -> Result<Vec<Tensor3>> {
    let mut m = reference.clone();
    let mut x = image.clone();
    let mut outs = Vec::with_capacity(bundle.layers.len());
    for (i, rec) in bundle.layers.iter().enumerate() {
        let y = run_layer(rec, &plan.layers[i], &x, |sub, xin, w, _| {
            m.load_weights(w, sub.r_w)?;
            oracle_layer(sub, xin, &m)
        })?;
        x = between_layers(&y, rec, bundle.layers.get(i + 1))?;
        outs.push(y);
    }
    Ok(outs)
}

fn final_scores(t: &Tensor3) -> Vec<u32> {
    t.data.clone()
}

/// Runs `images` through the bundle on clones of `macro_`. With
/// `with_reference`, the exact forward pass on an ideal twin is reported
/// alongside. Images run in parallel; results are independent of the
/// thread count.
pub fn run_network<T: Scalar>(
    bundle: &ModelBundle,
    images: &[Tensor3],
    labels: Option<&[usize]>,
    macro_: &MacroInstance<T>,
    pipe: &PipelineConfig,
    with_reference: bool,
) -> Result<NetworkReport> {
    bundle.validate()?;
    if let Some(l) = labels {
        if l.len() != images.len() {
            return config(format!("{} labels for {} images", l.len(), images.len()));
        }
    }
    let plan = plan_mapping(bundle, &macro_.config().geometry)?;
    let ideal = if with_reference {
        let mut m = MacroInstance::<T>::new(macro_.config().clone(), crate::config::NonidealityConfig::ideal())?;
        m.set_calibration(macro_.calibration().to_vec())?;
        m.set_beta_trims(macro_.beta_trims().to_vec())?;
        Some(m)
    } else {
        None
    };
    let n_layers = bundle.layers.len();
    let per_image = images
        .par_iter()
        .enumerate()
        .map(|(img, image)| -> Result<(ImageResult, Vec<LayerRollup>)> {
            let mut m = macro_.clone();
            let mut x = image.clone();
            let mut rollups = Vec::with_capacity(n_layers);
            let mut last = None;
            for (i, rec) in bundle.layers.iter().enumerate() {
                let mut roll = LayerRollup {
                    layer: i,
                    passes: plan.layers[i].passes(),
                    cycles: 0,
                    closed_form_cycles: 0,
                    saturated: 0,
                    energy: EnergyLedger::new(),
                };
                let y = run_layer(rec, &plan.layers[i], &x, |sub, xin, w, pass| {
                    m.load_weights(w, sub.r_w)?;
                    let base = key(&[domain::WORKLOAD, img as u64, i as u64, pass as u64]);
                    let t = simulate_layer(sub, xin, pipe, &mut m, base)?;
                    roll.cycles += t.cycles;
                    roll.closed_form_cycles += t.closed_form_cycles;
                    roll.saturated += t.saturated;
                    roll.energy.merge(&t.energy);
                    Ok(t.output)
                })?;
                rollups.push(roll);
                x = between_layers(&y, rec, bundle.layers.get(i + 1))?;
                last = Some(x.clone());
            }
            let scores = final_scores(&last.expect("bundle has layers"));
            let reference_prediction = match &ideal {
                Some(r) => {
                    let outs = reference_forward(bundle, &plan, image, r)?;
                    let y = outs.last().expect("bundle has layers");
                    let fin = between_layers(y, bundle.layers.last().unwrap(), None)?;
                    Some(argmax(&final_scores(&fin)))
                }
                None => None,
            };
            Ok((ImageResult { prediction: argmax(&scores), scores, reference_prediction }, rollups))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut layers: Vec<LayerRollup> = Vec::new();
    let mut results = Vec::with_capacity(images.len());
    for (res, rolls) in per_image {
        if layers.is_empty() {
            layers = rolls;
        } else {
            for (a, r) in layers.iter_mut().zip(rolls) {
                a.cycles += r.cycles;
                a.closed_form_cycles += r.closed_form_cycles;
                a.saturated += r.saturated;
                a.energy.merge(&r.energy);
            }
        }
        results.push(res);
    }
    let acc = |pred: &dyn Fn(&ImageResult) -> Option<usize>| {
        labels.map(|l| {
            results.iter().zip(l).filter(|(r, y)| pred(r) == Some(**y)).count() as f64 / l.len().max(1) as f64
        })
    };
    let accuracy = acc(&|r| Some(r.prediction));
    let reference_accuracy = if with_reference { acc(&|r| r.reference_prediction) } else { None };
    Ok(NetworkReport { images: results, accuracy, reference_accuracy, layers })
}

/// Small reference networks shipped with the simulator (not a replica of
/// any published network): shapes only, with input size.
pub fn reference_cnn_shapes() -> Vec<(LayerConfig, usize, usize)> {
    let mut l1 = LayerConfig::conv(4, 32, 4, 2, 4);
    let mut l2 = LayerConfig::conv(32, 64, 4, 2, 4);
    let mut l3 = LayerConfig::conv(64, 64, 4, 4, 4);
    l1.gamma = 4;
    l2.gamma = 8;
    l3.gamma = 8;
    l2.stride = 2;
    l3.stride = 2;
    let fc = LayerConfig { gamma: 8, ..LayerConfig::fc(8 * 8 * 64, 10, 4, 2, 8) };
    vec![(l1, 32, 32), (l2, 32, 32), (l3, 16, 16), (fc, 1, 1)]
}

/// A reference network with weights drawn from `seed`.
pub fn reference_bundle(shapes: &[LayerConfig], seed: u64) -> ModelBundle {
    use crate::bundle::QuantMeta;
    use crate::rng::NoiseStreams;
    let streams = NoiseStreams::new(seed);
    let layers = shapes
        .iter()
        .enumerate()
        .map(|(i, cfg)| {
            let mut rng = streams.stream3(domain::WORKLOAD, i as u64, 0);
            let weights = (0..cfg.c_out)
                .map(|_| (0..cfg.rows()).map(|_| rng.below(1 << cfg.r_w) as u32).collect())
                .collect();
            LayerRecord { cfg: cfg.clone(), pool: Pool::None, quant: QuantMeta::default(), weights }
        })
        .collect();
    ModelBundle { layers, calibration: None, beta_trims: None }
}

/// Uniform random image in `[0, 2^r_in)`.
pub fn random_image(h: usize, w: usize, c: usize, r_in: u32, seed: u64) -> Tensor3 {
    use crate::rng::NoiseStreams;
    let mut rng = NoiseStreams::new(seed).stream3(domain::WORKLOAD, u64::MAX, 0);
    let data = (0..h * w * c).map(|_| rng.below(1 << r_in) as u32).collect();
    Tensor3 { h, w, c, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::QuantMeta;

    fn two_layer() -> ModelBundle {
        let mut b = reference_bundle(&[LayerConfig::conv(4, 8, 4, 1, 4), LayerConfig::fc(4 * 4 * 8, 3, 4, 2, 8)], 5);
        b.layers[0].pool = Pool::Max2;
        b.layers[0].quant = QuantMeta::default();
        b
    }

    #[test]
    fn ideal_network_equals_integer_reference() {
        let b = two_layer();
        let m = MacroInstance::<f64>::ideal();
        let imgs: Vec<Tensor3> = (0..3).map(|s| random_image(8, 8, 4, 4, s)).collect();
        let rep = run_network(&b, &imgs, Some(&[0, 1, 2]), &m, &PipelineConfig::default(), true).unwrap();
        for r in &rep.images {
            assert_eq!(Some(r.prediction), r.reference_prediction);
        }
        let plan = plan_mapping(&b, &m.config().geometry).unwrap();
        let outs = reference_forward(&b, &plan, &imgs[0], &m).unwrap();
        assert_eq!(outs.last().unwrap().data, rep.images[0].scores);
        assert_eq!(rep.accuracy, rep.reference_accuracy);
        assert!(rep.layers.iter().all(|l| l.cycles == l.closed_form_cycles));
    }
}
