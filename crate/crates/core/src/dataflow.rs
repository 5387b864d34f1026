//! Accelerator dataflow around the macro: 128b LMEM transfers, im2col
//! reshaping into the input shift register, serial and pipelined execution,
//! and the energy ledger of a whole layer.
//!
//! Cycle accounting is defined by three per-output quantities:
//!
//! * `F` — input transfers for one kernel, `ceil(K·r_in·C_in / BW)`;
//! * `S` — output transfers for one output pixel, `ceil(r_out·C_out / BW)`;
//! * `N_cim` — cycles of one macro operation.
//!
//! In pipelined mode the fetch of the next kernel may begin in the last cycle
//! of the current macro operation (the shift register must stay constant
//! before that), and the next macro operation may begin in the last cycle of
//! the previous store (the output registers are double-buffered). The first
//! output of every image row refetches the whole kernel, `K·F` transfers.
//! In serial mode nothing overlaps.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::energy::{EnergyCategory, EnergyLedger, EnergyParams};
use crate::engine::{output_columns, outputs_per_block, CimCycleInput, MacroInstance};
use crate::dp_array::MacroGeometry;
use crate::error::{config, Error, Result};
use crate::mapping::map_layer;
use crate::rng::key;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Fc,
}

impl FromStr for LayerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "conv" => Ok(Self::Conv),
            "fc" => Ok(Self::Fc),
            other => Err(Error::Config(format!("unknown layer kind '{other}' (conv|fc)"))),
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Conv => "conv",
            Self::Fc => "fc",
        })
    }
}

/// One CNN layer as executed on a single macro pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerConfig {
    pub kind: LayerKind,
    /// Kernel taps, a perfect square for conv layers; 1 for fc.
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub r_in: u32,
    pub r_w: u32,
    pub r_out: u32,
    pub gamma: u32,
    /// Per-output-channel 5b offset codes; empty means zero.
    pub beta: Vec<i8>,
    pub stride: usize,
    pub padding: usize,
    /// Inputs arrive in two's complement and are shifted to offset binary.
    pub signed_input: bool,
    /// Outputs leave in two's complement.
    pub signed_output: bool,
}

impl LayerConfig {
    pub fn conv(c_in: usize, c_out: usize, r_in: u32, r_w: u32, r_out: u32) -> Self {
        Self {
            kind: LayerKind::Conv,
            k: 9,
            c_in,
            c_out,
            r_in,
            r_w,
            r_out,
            gamma: 1,
            beta: vec![],
            stride: 1,
            padding: 1,
            signed_input: false,
            signed_output: false,
        }
    }

    pub fn fc(c_in: usize, c_out: usize, r_in: u32, r_w: u32, r_out: u32) -> Self {
        Self { kind: LayerKind::Fc, k: 1, padding: 0, ..Self::conv(c_in, c_out, r_in, r_w, r_out) }
    }

    /// Macro rows used by one kernel.
    pub fn rows(&self) -> usize {
        self.k * self.c_in
    }

    pub fn kernel_bits(&self) -> u64 {
        (self.k * self.c_in) as u64 * self.r_in as u64
    }

    pub fn kernel_side(&self) -> usize {
        (self.k as f64).sqrt().round() as usize
    }

    /// Output map size for an `h × w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        match self.kind {
            LayerKind::Fc => (1, 1),
            LayerKind::Conv => {
                let s = self.kernel_side();
                let span = |x: usize| (x + 2 * self.padding).checked_sub(s).map_or(0, |d| d / self.stride + 1);
                if h == 0 || w == 0 {
                    (0, 0)
                } else {
                    (span(h), span(w))
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_out == 0 || self.c_in == 0 || self.k == 0 {
            return config("layer needs non-zero K, C_in and C_out");
        }
        if !(1..=8).contains(&self.r_in) || !(1..=8).contains(&self.r_out) || !(1..=4).contains(&self.r_w) {
            return config(format!(
                "precisions r_in={} r_w={} r_out={} outside [1,8]/[1,4]/[1,8]",
                self.r_in, self.r_w, self.r_out
            ));
        }
        if self.stride == 0 {
            return config("stride must be at least 1");
        }
        if !self.beta.is_empty() && self.beta.len() != self.c_out {
            return config(format!("{} beta codes for {} output channels", self.beta.len(), self.c_out));
        }
        if self.beta.iter().any(|b| !(-15..=15).contains(b)) {
            return config("beta codes must lie in [-15, 15]");
        }
        match self.kind {
            LayerKind::Conv => {
                if self.c_in % 4 != 0 {
                    return config(format!("conv C_in {} is not a multiple of 4", self.c_in));
                }
                let s = self.kernel_side();
                if s * s != self.k {
                    return config(format!("conv K {} is not a square kernel", self.k));
                }
            }
            LayerKind::Fc => {
                if self.k != 1 || self.padding != 0 {
                    return config("fc layers use K = 1 and no padding");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineMode {
    Serial,
    Pipelined,
}

impl FromStr for PipelineMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "serial" => Ok(Self::Serial),
            "pipelined" | "pipeline" => Ok(Self::Pipelined),
            other => Err(Error::Config(format!("unknown pipeline mode '{other}' (serial|pipelined)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub mode: PipelineMode,
    pub n_cim: u32,
    /// LMEM bits per transfer.
    pub bw: u32,
    /// For absolute-time reporting only.
    pub clock_hz: f64,
    pub lmem_in_bits: u64,
    pub lmem_out_bits: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: PipelineMode::Pipelined,
            n_cim: 1,
            bw: 128,
            clock_hz: 100e6,
            lmem_in_bits: 32 * 1024 * 8,
            lmem_out_bits: 32 * 1024 * 8,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cim == 0 || self.bw == 0 {
            return config("N_cim and BW must be at least 1");
        }
        if !(self.clock_hz > 0.0) {
            return config("clock must be positive");
        }
        Ok(())
    }
}

/// Input transfers per kernel.
pub fn fetch_transfers(layer: &LayerConfig, pipe: &PipelineConfig) -> u64 {
    layer.kernel_bits().div_ceil(pipe.bw as u64)
}

/// Output transfers per output pixel.
pub fn store_transfers(layer: &LayerConfig, pipe: &PipelineConfig) -> u64 {
    (layer.r_out as u64 * layer.c_out as u64).div_ceil(pipe.bw as u64)
}

/// Serial-mode penalty: one fetch, the macro operation and every store.
pub fn stall_cycles(layer: &LayerConfig, pipe: &PipelineConfig) -> Result<u64> {
    layer.validate()?;
    pipe.validate()?;
    Ok(1 + pipe.n_cim as u64 + store_transfers(layer, pipe))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    InputDominated,
    OutputDominated,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::InputDominated => "input-dominated",
            Self::OutputDominated => "output-dominated",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputCycles {
    pub n_in: u64,
    pub n_out: u64,
    pub cycles: u64,
    /// Ties count as input-dominated.
    pub regime: Regime,
}

/// Steady-state pipelined cycles per output within an image row.
pub fn cycles_per_output(layer: &LayerConfig, pipe: &PipelineConfig) -> Result<OutputCycles> {
    layer.validate()?;
    pipe.validate()?;
    let n_cim = pipe.n_cim as u64;
    let n_in = (n_cim - 1) + fetch_transfers(layer, pipe);
    let n_out = n_cim + store_transfers(layer, pipe) - 1;
    let regime = if n_in >= n_out { Regime::InputDominated } else { Regime::OutputDominated };
    Ok(OutputCycles { n_in, n_out, cycles: n_in.max(n_out), regime })
}

/// Closed-form layer latency for an `h_out × w_out` output map.
pub fn closed_form_cycles(layer: &LayerConfig, pipe: &PipelineConfig, h_out: usize, w_out: usize) -> Result<u64> {
    layer.validate()?;
    pipe.validate()?;
    if h_out == 0 || w_out == 0 {
        return Ok(0);
    }
    let (h, w) = (h_out as u64, w_out as u64);
    let f = fetch_transfers(layer, pipe);
    let s = store_transfers(layer, pipe);
    let n_cim = pipe.n_cim as u64;
    let row_fetch = layer.k as u64 * f;
    Ok(match pipe.mode {
        PipelineMode::Serial => {
            let stall = 1 + n_cim + s;
            // every output pays its fetch beyond the one counted in the stall
            h * ((row_fetch - 1 + stall) + (w - 1) * (f - 1 + stall))
        }
        PipelineMode::Pipelined => {
            let c = cycles_per_output(layer, pipe)?;
            let row_start = (n_cim - 1 + row_fetch).max(c.n_out);
            row_fetch + (h - 1) * row_start + h * (w - 1) * c.cycles + n_cim + s
        }
    })
}

/// Per-output start cycles of every phase, from the event simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputEvents {
    pub fetch_start: u64,
    pub fetch_end: u64,
    pub macro_start: u64,
    pub store_start: u64,
    pub store_end: u64,
}

/// Cycle-stepped simulation of the fetch port, the macro and the store port.
/// Each cycle first retires finished phases, then starts whatever the
/// resource and ordering rules allow.
pub fn simulate_timeline(layer: &LayerConfig, pipe: &PipelineConfig, h_out: usize, w_out: usize) -> Result<Vec<OutputEvents>> {
    layer.validate()?;
    pipe.validate()?;
    let n = h_out * w_out;
    let f = fetch_transfers(layer, pipe);
    let s = store_transfers(layer, pipe);
    let n_cim = pipe.n_cim as u64;
    let pipelined = pipe.mode == PipelineMode::Pipelined;
    let fetch_len = |i: usize| if i % w_out == 0 { layer.k as u64 * f } else { f };

    #[derive(Clone, Copy)]
    enum Port {
        Idle,
        Busy { item: usize, until: u64 },
    }
    let mut ev = vec![OutputEvents { fetch_start: 0, fetch_end: 0, macro_start: 0, store_start: 0, store_end: 0 }; n];
    let (mut fetch, mut cim, mut store) = (Port::Idle, Port::Idle, Port::Idle);
    let (mut next_fetch, mut next_macro, mut next_store) = (0usize, 0usize, 0usize);
    let mut fetched = 0usize; // kernels fully in the shift register
    let mut computed = 0usize; // results committed to the output registers
    let mut stored = 0usize;
    let mut t = 0u64;
    while stored < n {
        // retire
        if let Port::Busy { item, until } = fetch {
            if until == t {
                ev[item].fetch_end = t;
                fetched = item + 1;
                fetch = Port::Idle;
            }
        }
        if let Port::Busy { item, until } = cim {
            if until == t {
                computed = item + 1;
                cim = Port::Idle;
            }
        }
        if let Port::Busy { item, until } = store {
            if until == t {
                ev[item].store_end = t;
                stored = item + 1;
                store = Port::Idle;
            }
        }
        // start stores as soon as results are committed
        if matches!(store, Port::Idle) && next_store < computed {
            let i = next_store;
            ev[i].store_start = t;
            store = Port::Busy { item: i, until: t + s };
            next_store += 1;
        }
        // macro operations
        if matches!(cim, Port::Idle) && next_macro < fetched {
            let i = next_macro;
            let ready = if i == 0 {
                true
            } else if pipelined {
                // previous store in its last cycle or done
                stored >= i || matches!(store, Port::Busy { item, until } if item == i - 1 && until == t + 1)
            } else {
                stored >= i
            };
            if ready {
                ev[i].macro_start = t;
                cim = Port::Busy { item: i, until: t + n_cim };
                next_macro += 1;
            }
        }
        // fetches
        if matches!(fetch, Port::Idle) && next_fetch < n {
            let i = next_fetch;
            let ready = if i == 0 {
                true
            } else if pipelined {
                // the shift register holds kernel i-1 until its macro operation's last cycle
                next_macro >= i && matches!(cim, Port::Busy { item, until } if item == i - 1 && until == t + 1)
                    || computed >= i
            } else {
                stored >= i
            };
            if ready {
                ev[i].fetch_start = t;
                fetch = Port::Busy { item: i, until: t + fetch_len(i) };
                next_fetch += 1;
            }
        }
        t += 1;
    }
    Ok(ev)
}

/// Total cycles of a timeline: end of the last store.
pub fn timeline_cycles(events: &[OutputEvents]) -> u64 {
    events.last().map_or(0, |e| e.store_end)
}

/// Activation tensor in height × width × channel order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor3 {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<u32>,
}

impl Tensor3 {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c, data: vec![0; h * w * c] }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != h * w * c {
            return config(format!("tensor data has {} values, shape {h}x{w}x{c} needs {}", data.len(), h * w * c));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn get(&self, y: usize, x: usize, ch: usize) -> u32 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: u32) {
        self.data[(y * self.w + x) * self.c + ch] = v;
    }
}

/// Maps an `r`-bit two's-complement word to offset binary and back (the
/// same MSB flip in both directions).
pub fn flip_msb(v: u32, r: u32) -> u32 {
    v ^ (1 << (r - 1))
}

/// The kernel of output `(oy, ox)` in shift-register order (channel fastest,
/// kernel tap last); also returns how many taps fell into the padding.
pub fn gather_kernel(layer: &LayerConfig, image: &Tensor3, oy: usize, ox: usize) -> (Vec<u32>, usize) {
    let side = layer.kernel_side();
    let zero = if layer.signed_input { flip_msb(0, layer.r_in) } else { 0 };
    let mut rows = Vec::with_capacity(layer.rows());
    let mut padded = 0;
    for t in 0..layer.k {
        let (ky, kx) = (t / side, t % side);
        let iy = (oy * layer.stride + ky).checked_sub(layer.padding).filter(|y| *y < image.h);
        let ix = (ox * layer.stride + kx).checked_sub(layer.padding).filter(|x| *x < image.w);
        match (iy, ix) {
            (Some(y), Some(x)) => rows.extend((0..layer.c_in).map(|c| {
                let v = image.get(y, x, c);
                if layer.signed_input {
                    flip_msb(v, layer.r_in)
                } else {
                    v
                }
            })),
            _ => {
                padded += 1;
                rows.extend(std::iter::repeat_n(zero, layer.c_in));
            }
        }
    }
    (rows, padded)
}

/// One 128b (or narrower) LMEM fetch of the im2col plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transfer {
    /// First output pixel (row-major) served by this transfer.
    pub first_pixel: usize,
    pub n_pixels: usize,
    /// Part index when a kernel spans several transfers.
    pub part: usize,
    pub parts: usize,
    pub bits: u64,
    /// Enabled shift-register sub-blocks (CH_i).
    pub ch_mask: u32,
    /// Enabled kernel-column selects (CS_K,j).
    pub cs_mask: u8,
}

/// Transfer plan of a conv layer over an `h × w` input: whole kernels pack
/// along an image row without straddling transfers; kernels wider than a
/// transfer are split into `ceil(bits / BW)` parts.
pub fn im2col_schedule(layer: &LayerConfig, h: usize, w: usize, pipe: &PipelineConfig) -> Result<Vec<Transfer>> {
    layer.validate()?;
    pipe.validate()?;
    let (h_out, w_out) = layer.output_dims(h, w);
    let bits = layer.kernel_bits();
    let bw = pipe.bw as u64;
    let rows_per_unit = 36u64;
    let row_bits = layer.r_in as u64;
    let mask_for = |lo: u64, hi: u64| -> (u32, u8) {
        let (r0, r1) = (lo / row_bits, (hi - 1) / row_bits);
        let mut ch = 0u32;
        for u in r0 / rows_per_unit..=r1 / rows_per_unit {
            ch |= 1 << (u % 32);
        }
        let side = layer.kernel_side().max(1) as u64;
        let (t0, t1) = (r0 / layer.c_in as u64, r1 / layer.c_in as u64);
        let mut cs = 0u8;
        for t in t0..=t1 {
            cs |= 1 << ((t % side) * 3 / side);
        }
        (ch, cs)
    };
    let mut plan = Vec::new();
    for oy in 0..h_out {
        if bits <= bw {
            let per = (bw / bits) as usize;
            let (ch, cs) = mask_for(0, bits);
            let mut ox = 0;
            while ox < w_out {
                let n = per.min(w_out - ox);
                plan.push(Transfer {
                    first_pixel: oy * w_out + ox,
                    n_pixels: n,
                    part: 0,
                    parts: 1,
                    bits: n as u64 * bits,
                    ch_mask: ch,
                    cs_mask: cs,
                });
                ox += n;
            }
        } else {
            let parts = bits.div_ceil(bw) as usize;
            for ox in 0..w_out {
                for p in 0..parts {
                    let lo = p as u64 * bw;
                    let hi = (lo + bw).min(bits);
                    let (ch, cs) = mask_for(lo, hi);
                    plan.push(Transfer {
                        first_pixel: oy * w_out + ox,
                        n_pixels: 1,
                        part: p,
                        parts,
                        bits: hi - lo,
                        ch_mask: ch,
                        cs_mask: cs,
                    });
                }
            }
        }
    }
    Ok(plan)
}

/// Result of simulating one layer pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub output: Tensor3,
    /// Cycle count of the event simulation.
    pub cycles: u64,
    pub closed_form_cycles: u64,
    pub per_output: Option<OutputCycles>,
    pub input_transfers: usize,
    pub output_transfers: u64,
    pub padded_taps: usize,
    pub saturated: usize,
    pub energy: EnergyLedger,
}

impl LayerTrace {
    /// Operations counted as 2 per multiply-accumulate.
    pub fn ops(&self, layer: &LayerConfig) -> u64 {
        2 * (self.output.h * self.output.w) as u64 * layer.rows() as u64 * layer.c_out as u64
    }
}

/// Runs one layer pass: im2col fetches, one macro cycle per output pixel,
/// register commit and stores. Arithmetic happens only in the macro; the
/// dataflow moves and reformats data and accounts cycles and energy.
pub fn simulate_layer<T: Scalar>(
    layer: &LayerConfig,
    image: &Tensor3,
    pipe: &PipelineConfig,
    macro_: &mut MacroInstance<T>,
    cycle_base: u64,
) -> Result<LayerTrace> {
    layer.validate()?;
    pipe.validate()?;
    let g = macro_.config().geometry;
    if image.c != layer.c_in {
        return config(format!("image has {} channels, layer expects {}", image.c, layer.c_in));
    }
    if layer.rows() > g.n_rows {
        return Err(Error::Capacity { what: "macro rows".into(), required: layer.rows(), available: g.n_rows });
    }
    let max_out = g.n_blocks * outputs_per_block(layer.r_w);
    if layer.c_out > max_out {
        return Err(Error::Capacity { what: "macro outputs".into(), required: layer.c_out, available: max_out });
    }
    let in_bits = (image.h * image.w * image.c) as u64 * layer.r_in as u64;
    if in_bits > pipe.lmem_in_bits {
        return Err(Error::Capacity {
            what: "input LMEM bits".into(),
            required: in_bits as usize,
            available: pipe.lmem_in_bits as usize,
        });
    }
    let (h_out, w_out) = layer.output_dims(image.h, image.w);
    let out_bits = (h_out * w_out * layer.c_out) as u64 * layer.r_out as u64;
    if out_bits > pipe.lmem_out_bits {
        return Err(Error::Capacity {
            what: "output LMEM bits".into(),
            required: out_bits as usize,
            available: pipe.lmem_out_bits as usize,
        });
    }
    let mut output = Tensor3::zeros(h_out, w_out, layer.c_out);
    let closed = closed_form_cycles(layer, pipe, h_out, w_out)?;
    if h_out == 0 || w_out == 0 {
        return Ok(LayerTrace {
            output,
            cycles: 0,
            closed_form_cycles: 0,
            per_output: None,
            input_transfers: 0,
            output_transfers: 0,
            padded_taps: 0,
            saturated: 0,
            energy: EnergyLedger::new(),
        });
    }
    let events = simulate_timeline(layer, pipe, h_out, w_out)?;
    let schedule = match layer.kind {
        LayerKind::Conv => im2col_schedule(layer, image.h, image.w, pipe)?,
        LayerKind::Fc => {
            let bits = layer.kernel_bits();
            let parts = bits.div_ceil(pipe.bw as u64) as usize;
            (0..parts)
                .map(|p| Transfer {
                    first_pixel: 0,
                    n_pixels: 1,
                    part: p,
                    parts,
                    bits: (bits - p as u64 * pipe.bw as u64).min(pipe.bw as u64),
                    ch_mask: 0,
                    cs_mask: 0,
                })
                .collect()
        }
    };

    // the macro evaluates pixels independently; commits follow timeline order
    let n_pix = h_out * w_out;
    let kernels: Vec<(Vec<u32>, usize)> =
        (0..n_pix).map(|i| gather_kernel(layer, image, i / w_out, i % w_out)).collect();
    let padded_taps = kernels.iter().map(|k| k.1).sum();
    let inputs: Vec<CimCycleInput> = kernels
        .into_iter()
        .map(|(rows, _)| CimCycleInput {
            inputs: rows,
            r_in: layer.r_in,
            r_w: layer.r_w,
            r_out: layer.r_out,
            gamma: layer.gamma,
            n_outputs: layer.c_out,
            beta: layer.beta.clone(),
        })
        .collect();
    let macro_ref: &MacroInstance<T> = macro_;
    let reports = inputs
        .par_iter()
        .enumerate()
        .map(|(i, inp)| macro_ref.run_cycle_with(inp, key(&[cycle_base, i as u64]), false))
        .collect::<Result<Vec<_>>>()?;

    let e: EnergyParams = *macro_.energy_params();
    let mut energy = EnergyLedger::new();
    let mut saturated = 0;
    let cpb = g.cols_per_block;
    let mut order: Vec<usize> = (0..n_pix).collect();
    order.sort_by_key(|i| events[*i].macro_start);
    for i in order {
        let (inp, rep) = (&inputs[i], &reports[i]);
        macro_.commit(inp, rep);
        energy.merge(&rep.energy);
        saturated += rep.saturated.iter().filter(|s| **s).count();
        for o in 0..layer.c_out {
            let msb = *output_columns(o, layer.r_w, cpb).last().expect("r_w >= 1");
            let code = macro_.registers().read(msb);
            let v = if layer.signed_output { flip_msb(code, layer.r_out) } else { code };
            output.set(i / w_out, i % w_out, o, v);
        }
    }

    let bw = pipe.bw as f64;
    for t in &schedule {
        energy.add(EnergyCategory::Lmem, e.lmem_access_128b * t.bits as f64 / bw);
        energy.add(EnergyCategory::ShiftRegister, e.shift_register_bit * t.bits as f64);
    }
    let s = store_transfers(layer, pipe);
    let store_bits = layer.r_out as u64 * layer.c_out as u64;
    for _ in 0..n_pix {
        let mut left = store_bits;
        for _ in 0..s {
            let b = left.min(pipe.bw as u64);
            left -= b;
            energy.add(EnergyCategory::Lmem, e.lmem_access_128b * b as f64 / bw);
        }
    }
    let cycles = timeline_cycles(&events);
    let busy = n_pix as u64 * pipe.n_cim as u64;
    let idle = cycles - busy;
    energy.add_n(EnergyCategory::Leakage, idle, idle as f64 * e.leakage_per_idle_cycle);

    Ok(LayerTrace {
        output,
        cycles,
        closed_form_cycles: closed,
        per_output: (pipe.mode == PipelineMode::Pipelined).then(|| cycles_per_output(layer, pipe)).transpose()?,
        input_transfers: schedule.len(),
        output_transfers: s * n_pix as u64,
        padded_taps,
        saturated,
        energy,
    })
}

/// Off-chip traffic estimate for a network whose weights are streamed from
/// DRAM once per image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DramOverlay {
    pub compute_cycles: u64,
    pub weight_bits: u64,
    pub intermediate_bits: u64,
    pub transfer_cycles: u64,
    pub latency_ratio: f64,
    pub dram_energy: f64,
    pub compute_energy: f64,
    pub energy_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DramParams {
    /// Off-chip bits per cycle; `None` is unlimited.
    pub offchip_bw: Option<u32>,
    pub energy_per_bit: f64,
}

impl Default for DramParams {
    fn default() -> Self {
        Self { offchip_bw: Some(32), energy_per_bit: 1e-12 }
    }
}

/// Analytic energy of one layer pass under `params`, without running the
/// macro: the ladder bias per macro cycle, SA and register events per
/// conversion, a half-swing DP drive per input bit, and LMEM and
/// shift-register traffic.
pub fn layer_energy_estimate(
    layer: &LayerConfig,
    pipe: &PipelineConfig,
    h_out: usize,
    w_out: usize,
    params: &EnergyParams,
    c_c: f64,
    v_ddl: f64,
    v_ddh: f64,
) -> f64 {
    let pixels = (h_out * w_out) as f64;
    let convs = pixels * layer.c_out as f64;
    let cols = pixels * (layer.c_out as f64 * layer.r_w as f64);
    let ladder = pixels * params.ladder_current * params.ladder_time * v_ddh;
    let adc = layer.r_out as f64 * (params.sa_decision + params.register_bit);
    let dp = cols * layer.r_in as f64 * layer.rows() as f64 * 0.5 * c_c * v_ddl * v_ddl;
    let traffic = pixels
        * (fetch_transfers(layer, pipe) + store_transfers(layer, pipe)) as f64
        * (params.lmem_access_128b + params.shift_register_bit * pipe.bw as f64);
    ladder + convs * adc + dp + traffic
}

/// Weight (and overflowing intermediate) traffic of `layers`, each given with
/// its input size, relative to on-chip compute. Layers are split into macro
/// passes exactly as the runtime maps them.
pub fn dram_overlay_estimate(
    layers: &[(LayerConfig, usize, usize)],
    geom: &MacroGeometry,
    pipe: &PipelineConfig,
    dram: &DramParams,
    energy: &EnergyParams,
    c_c: f64,
    v_ddl: f64,
    v_ddh: f64,
) -> Result<DramOverlay> {
    let mut compute_cycles = 0;
    let mut compute_energy = 0.0;
    let mut weight_bits = 0;
    let mut intermediate_bits = 0;
    for (i, (layer, h, w)) in layers.iter().enumerate() {
        let (ho, wo) = layer.output_dims(*h, *w);
        let m = map_layer(i, layer, geom)?;
        for s in 0..m.channel_splits.len() {
            for b in 0..m.column_batches.len() {
                let sub = m.sub_layer(layer, s, b);
                compute_cycles += closed_form_cycles(&sub, pipe, ho, wo)?;
                compute_energy += layer_energy_estimate(&sub, pipe, ho, wo, energy, c_c, v_ddl, v_ddh);
            }
        }
        weight_bits += (layer.rows() * layer.c_out) as u64 * layer.r_w as u64;
        let out_bits = (ho * wo * layer.c_out) as u64 * layer.r_out as u64;
        if out_bits > pipe.lmem_out_bits {
            // spilled once and read back once
            intermediate_bits += 2 * out_bits;
        }
    }
    let moved = weight_bits + intermediate_bits;
    let transfer_cycles = dram.offchip_bw.map_or(0, |bw| moved.div_ceil(bw.max(1) as u64));
    let dram_energy = if dram.offchip_bw.is_some() { moved as f64 * dram.energy_per_bit } else { 0.0 };
    Ok(DramOverlay {
        compute_cycles,
        weight_bits,
        intermediate_bits,
        transfer_cycles,
        latency_ratio: transfer_cycles as f64 / compute_cycles.max(1) as f64,
        dram_energy,
        compute_energy,
        energy_ratio: dram_energy / compute_energy.max(f64::MIN_POSITIVE),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_cycle_examples() {
        let pipe = PipelineConfig::default();
        assert_eq!(stall_cycles(&LayerConfig::conv(16, 256, 8, 1, 8), &pipe).unwrap(), 18);
        assert_eq!(stall_cycles(&LayerConfig::conv(16, 128, 8, 1, 1), &pipe).unwrap(), 3);
        assert!(stall_cycles(&LayerConfig::conv(16, 0, 8, 1, 8), &pipe).is_err());
        let c = cycles_per_output(&LayerConfig::conv(16, 64, 8, 1, 8), &pipe).unwrap();
        assert_eq!((c.n_in, c.n_out, c.cycles, c.regime), (9, 4, 9, Regime::InputDominated));
    }

    #[test]
    fn im2col_packing_and_splitting() {
        let pipe = PipelineConfig::default();
        let small = LayerConfig::conv(4, 8, 1, 1, 8);
        let plan = im2col_schedule(&small, 8, 8, &pipe).unwrap();
        assert!(plan.iter().all(|t| t.n_pixels <= 3 && t.bits == 36 * t.n_pixels as u64));
        assert_eq!(plan.iter().filter(|t| t.first_pixel < 8).count(), 3);
        let big = LayerConfig::conv(64, 8, 8, 1, 8);
        let plan = im2col_schedule(&big, 3, 3, &pipe).unwrap();
        assert_eq!(plan.len(), 9 * 36);
        assert_eq!(plan[0].parts, 36);
        assert!(im2col_schedule(&LayerConfig::conv(6, 8, 1, 1, 8), 4, 4, &pipe).is_err());
    }

    #[test]
    fn padding_counts_taps_outside_the_image() {
        let layer = LayerConfig::conv(4, 4, 4, 1, 8);
        let img = Tensor3::from_vec(1, 1, 4, vec![1, 2, 3, 4]).unwrap();
        let (rows, padded) = gather_kernel(&layer, &img, 0, 0);
        assert_eq!(padded, 8);
        assert_eq!(&rows[16..20], &[1, 2, 3, 4]);
        assert_eq!(rows.iter().filter(|v| **v != 0).count(), 4);
    }

    #[test]
    fn timeline_matches_closed_form_on_both_regimes() {
        for mode in [PipelineMode::Serial, PipelineMode::Pipelined] {
            for n_cim in [1, 3] {
                let pipe = PipelineConfig { mode, n_cim, ..Default::default() };
                for layer in [LayerConfig::conv(16, 64, 8, 1, 8), LayerConfig::conv(4, 256, 2, 1, 8)] {
                    let ev = simulate_timeline(&layer, &pipe, 3, 5).unwrap();
                    assert_eq!(timeline_cycles(&ev), closed_form_cycles(&layer, &pipe, 3, 5).unwrap());
                }
            }
        }
    }
}
