//! Capacitive-network primitives: charge sharing, precharge and sampled noise.
//!
//! Only settled end-of-phase values are modeled; there is no transient solver.

use crate::error::{usage, Result};
use crate::rng::Rng;
use crate::scalar::{Scalar, BOLTZMANN};

/// One capacitor node (farads, volts).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapNode<T> {
    capacitance: T,
    pub voltage: T,
}

impl<T: Scalar> CapNode<T> {
    pub fn new(capacitance: T, voltage: T) -> Result<Self> {
        if !(capacitance > T::zero()) || !capacitance.is_finite() {
            return usage(format!("capacitance must be > 0, got {capacitance}"));
        }
        if !voltage.is_finite() {
            return usage("node voltage must be finite");
        }
        Ok(Self { capacitance, voltage })
    }

    pub fn capacitance(&self) -> T {
        self.capacitance
    }

    pub fn charge(&self) -> T {
        self.capacitance * self.voltage
    }
}

fn canonical_key<T: Scalar>(n: &CapNode<T>) -> (f64, f64) {
    (n.capacitance.to_f64_lossy(), n.voltage.to_f64_lossy())
}

/// Connects all `nodes` and returns the settled common voltage
/// `V* = sum(C_i V_i) / sum(C_i)`. Every node is left at `V*`.
///
/// Terms are summed with compensation in ascending `(C, V)` order, so
/// any permutation of the same nodes gives a bit-identical result. Nodes that
/// already agree are left untouched, which makes repeated sharing idempotent.
pub fn share<T: Scalar>(nodes: &mut [CapNode<T>]) -> Result<T> {
    if nodes.len() < 2 {
        return usage(format!("share needs at least 2 nodes, got {}", nodes.len()));
    }
    let first = nodes[0].voltage;
    if nodes.iter().all(|n| n.voltage == first) {
        return Ok(first);
    }
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.sort_by(|&a, &b| {
        canonical_key(&nodes[a])
            .partial_cmp(&canonical_key(&nodes[b]))
            .expect("finite node values")
    });
    let q = T::compensated_sum(order.iter().map(|&i| nodes[i].charge()));
    let c = T::compensated_sum(order.iter().map(|&i| nodes[i].capacitance));
    let v = q / c;
    for n in nodes.iter_mut() {
        n.voltage = v;
    }
    Ok(v)
}

/// Two-node share helper used by the accumulation and weight-combining phases.
pub fn share_pair<T: Scalar>(a: &mut CapNode<T>, b: &mut CapNode<T>) -> T {
    let mut pair = [*a, *b];
    let v = share(&mut pair).expect("two valid nodes");
    a.voltage = v;
    b.voltage = v;
    v
}

/// Drives `node` to `level` through an ideal switch. `level` must lie within
/// `[0, v_ddh]`.
pub fn precharge<T: Scalar>(node: &mut CapNode<T>, level: T, v_ddh: T) -> Result<()> {
    if level < T::zero() || level > v_ddh || !level.is_finite() {
        return usage(format!("precharge level {level} V outside rails [0, {v_ddh}] V"));
    }
    node.voltage = level;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseKind {
    /// kT/C noise of the node the source is attached to; temperature in kelvin.
    ThermalKtc { temperature: f64 },
    /// Fixed RMS in volts.
    FixedSigma(f64),
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSource {
    pub kind: NoiseKind,
}

impl NoiseSource {
    pub fn thermal(temperature: f64) -> Self {
        Self { kind: NoiseKind::ThermalKtc { temperature } }
    }

    pub fn fixed(sigma: f64) -> Self {
        Self { kind: NoiseKind::FixedSigma(sigma) }
    }

    pub fn none() -> Self {
        Self { kind: NoiseKind::None }
    }

    /// RMS voltage this source produces on a node of capacitance `c` (farads).
    pub fn sigma(&self, c: f64) -> f64 {
        match self.kind {
            NoiseKind::ThermalKtc { temperature } => ktc_sigma(c, temperature),
            NoiseKind::FixedSigma(s) => s,
            NoiseKind::None => 0.0,
        }
    }
}

/// sqrt(k_B T / C) in volts.
pub fn ktc_sigma(capacitance: f64, temperature: f64) -> f64 {
    (BOLTZMANN * temperature / capacitance).sqrt()
}

/// Draws one zero-mean Gaussian sample for `node` from `rng`.
pub fn sample_noise<T: Scalar>(src: &NoiseSource, node: &CapNode<T>, rng: &mut Rng) -> T {
    let sigma = src.sigma(node.capacitance.to_f64_lossy());
    if sigma == 0.0 {
        return T::zero();
    }
    T::lit(rng.normal(sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NoiseStreams;

    const FF: f64 = 1e-15;

    fn node(c: f64, v: f64) -> CapNode<f64> {
        CapNode::new(c, v).unwrap()
    }

    #[test]
    fn equal_caps_average() {
        let mut n = [node(FF, 0.4), node(FF, 0.8)];
        let v = share(&mut n).unwrap();
        assert!((v - 0.6).abs() < 1e-15);
        assert_eq!(n[0].voltage, n[1].voltage);
    }

    #[test]
    fn identity_when_already_equal() {
        let mut n = [node(2.0 * FF, 0.37), node(2.0 * FF, 0.37)];
        assert_eq!(share(&mut n).unwrap(), 0.37);
    }

    #[test]
    fn small_cell_onto_large_load() {
        // (0.7*0.8 + 40*0.4) / 40.7 = 16.56 / 40.7
        let mut n = [node(0.7 * FF, 0.8), node(40.0 * FF, 0.4)];
        let v = share(&mut n).unwrap();
        assert!((v - 16.56 / 40.7).abs() < 1e-12);
        assert!((v - 0.40688).abs() < 5e-6);
    }

    #[test]
    fn rejects_degenerate_lists() {
        assert!(share::<f64>(&mut []).is_err());
        assert!(share(&mut [node(FF, 0.1)]).is_err());
        assert!(CapNode::new(0.0, 0.1).is_err());
        assert!(CapNode::new(-FF, 0.1).is_err());
    }

    #[test]
    fn precharge_rails() {
        let mut n = node(FF, 0.1);
        precharge(&mut n, 0.4, 0.8).unwrap();
        assert_eq!(n.voltage, 0.4);
        let mut m = node(FF, 0.7);
        precharge(&mut m, 0.7, 0.8).unwrap();
        assert_eq!(m.voltage, 0.7);
        assert!(precharge(&mut m, 0.9, 0.8).is_err());
        assert!(precharge(&mut m, -0.01, 0.8).is_err());
    }

    #[test]
    fn ktc_of_coupling_cap_is_about_2p4_mv() {
        let s = ktc_sigma(0.7 * FF, 300.0);
        assert!((s - 2.43e-3).abs() < 0.01e-3, "{s}");
    }

    #[test]
    fn none_source_is_silent() {
        let mut rng = NoiseStreams::new(1).stream3(0, 0, 0);
        let n = node(FF, 0.4);
        assert_eq!(sample_noise(&NoiseSource::none(), &n, &mut rng), 0.0);
    }

    #[test]
    fn fixed_sigma_statistics() {
        let mut rng = NoiseStreams::new(7).stream3(0, 1, 0);
        let n = node(FF, 0.4);
        let src = NoiseSource::fixed(1e-3);
        let count = 1_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..count {
            let x = sample_noise(&src, &n, &mut rng);
            s1 += x;
            s2 += x * x;
        }
        let mean = s1 / count as f64;
        let std = (s2 / count as f64 - mean * mean).sqrt();
        assert!((std - 1e-3).abs() < 0.02e-3, "{std}");
    }

    #[test]
    fn works_in_single_precision() {
        let mut n = [
            CapNode::new(1e-15_f32, 0.4).unwrap(),
            CapNode::new(1e-15_f32, 0.8).unwrap(),
        ];
        let v = share(&mut n).unwrap();
        assert!((v - 0.6).abs() < 1e-6);
    }
}
