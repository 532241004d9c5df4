//! Discrete-time LIF/IF neuron layers with reset-by-subtraction and
//! leak-weighted average spiking rate (ASR) accumulation.
//!
//! Per step and per neuron:
//!
//! ```text
//! u ← γ·u + I
//! s = [u > v_th]
//! u ← u − v_th·s
//! ```
//!
//! Resting potential and membrane resistance are folded into the synaptic
//! weights and bias, so neither appears here.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::RealTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct LifParams {
    /// Firing threshold.
    pub v_th: f64,
    /// Leak factor; 1 gives integrate-and-fire.
    pub gamma: f64,
}

impl LifParams {
    pub fn new(v_th: f64, gamma: f64) -> Result<Self> {
        let p = Self { v_th, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn integrate_and_fire(v_th: f64) -> Result<Self> {
        Self::new(v_th, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_th.is_finite() && self.v_th > 0.0) {
            return Err(Error::Config(format!("v_th must be > 0, got {}", self.v_th)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        Ok(())
    }
}

impl Default for LifParams {
    fn default() -> Self {
        Self { v_th: 1.0, gamma: 1.0 }
    }
}

/// Binary activations for one time step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeTensor {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl SpikeTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            bits: vec![false; shape.iter().product()],
        }
    }

    pub fn from_bits(shape: Vec<usize>, bits: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != bits.len() {
            return Err(Error::dim("SpikeTensor::from_bits", &shape, &[bits.len()]));
        }
        Ok(Self { shape, bits })
    }

    /// Converts a real tensor whose entries are exactly 0 or 1.
    pub fn from_real(t: &RealTensor) -> Result<Self> {
        let mut bits = Vec::with_capacity(t.len());
        for &v in t.data() {
            if v == 0.0 {
                bits.push(false);
            } else if v == 1.0 {
                bits.push(true);
            } else {
                return Err(Error::contract(format!("spike tensor entry {v} is not binary")));
            }
        }
        Ok(Self {
            shape: t.shape().to_vec(),
            bits,
        })
    }

    pub fn to_real(&self) -> RealTensor {
        RealTensor::from_parts(
            self.shape.clone(),
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[bool] {
        let c = self.cols();
        &self.bits[r * c..(r + 1) * c]
    }

    pub fn count(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Self {
        let c = self.cols();
        let mut bits = Vec::with_capacity(self.rows() * (end - start));
        for r in 0..self.rows() {
            bits.extend_from_slice(&self.bits[r * c + start..r * c + end]);
        }
        Self {
            shape: vec![self.rows(), end - start],
            bits,
        }
    }
}

/// Membrane potentials, last spikes and ASR accumulators of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronState {
    params: LifParams,
    u: Vec<f64>,
    last_spikes: SpikeTensor,
    asr_num: Vec<f64>,
    asr_den: f64,
    t: usize,
    spike_total: u64,
}

impl NeuronState {
    /// Fresh state with `u[0] = 0` and `s[0] = 0`.
    pub fn new(shape: &[usize], params: LifParams) -> Self {
        let n = shape.iter().product();
        Self {
            params,
            u: vec![0.0; n],
            last_spikes: SpikeTensor::zeros(shape),
            asr_num: vec![0.0; n],
            asr_den: 0.0,
            t: 0,
            spike_total: 0,
        }
    }

    pub fn params(&self) -> LifParams {
        self.params
    }

    pub fn shape(&self) -> &[usize] {
        self.last_spikes.shape()
    }

    pub fn neurons(&self) -> usize {
        self.u.len()
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn membrane(&self) -> RealTensor {
        RealTensor::from_parts(self.shape().to_vec(), self.u.clone())
    }

    pub fn last_spikes(&self) -> &SpikeTensor {
        &self.last_spikes
    }

    /// Total spikes emitted since construction.
    pub fn spike_total(&self) -> u64 {
        self.spike_total
    }

    /// Leaky integration, thresholding and reset-by-subtraction for one step.
    /// Any bias must already be folded into `input_current`.
    pub fn lif_step(&mut self, input_current: &RealTensor) -> Result<SpikeTensor> {
        if input_current.shape() != self.shape() {
            return Err(Error::dim("lif_step", self.shape(), input_current.shape()));
        }
        let LifParams { v_th, gamma } = self.params;
        let mut bits = Vec::with_capacity(self.u.len());
        for (u, &i) in self.u.iter_mut().zip(input_current.data()) {
            *u = gamma * *u + i;
            let fire = *u > v_th;
            if fire {
                *u -= v_th;
            }
            bits.push(fire);
        }
        let spikes = SpikeTensor {
            shape: self.shape().to_vec(),
            bits,
        };
        self.spike_total += spikes.count();
        self.last_spikes = spikes.clone();
        self.t += 1;
        Ok(spikes)
    }

    /// Folds one step of spikes into the leak-weighted rate accumulators:
    /// `num ← γ·num + s`, `den ← γ·den + 1`.
    pub fn asr_update(&mut self, spikes: &SpikeTensor) -> Result<()> {
        if spikes.shape() != self.shape() {
            return Err(Error::dim("asr_update", self.shape(), spikes.shape()));
        }
        let gamma = self.params.gamma;
        for (n, &s) in self.asr_num.iter_mut().zip(&spikes.bits) {
            *n = gamma * *n + if s { 1.0 } else { 0.0 };
        }
        self.asr_den = gamma * self.asr_den + 1.0;
        Ok(())
    }

    /// [`lif_step`](Self::lif_step) followed by [`asr_update`](Self::asr_update).
    pub fn step(&mut self, input_current: &RealTensor) -> Result<SpikeTensor> {
        let spikes = self.lif_step(input_current)?;
        self.asr_update(&spikes)?;
        Ok(spikes)
    }

    /// Current average spiking rate, in `[0, 1]`.
    pub fn asr(&self) -> Result<RealTensor> {
        if self.t == 0 || self.asr_den == 0.0 {
            return Err(Error::contract("ASR is undefined before the first time step"));
        }
        let den = self.asr_den;
        Ok(RealTensor::from_parts(
            self.shape().to_vec(),
            self.asr_num.iter().map(|n| (n / den).clamp(0.0, 1.0)).collect(),
        ))
    }

    /// Mean ASR over all neurons; 0 before the first step.
    pub fn mean_asr(&self) -> f64 {
        if self.asr_den == 0.0 || self.u.is_empty() {
            return 0.0;
        }
        self.asr_num.iter().sum::<f64>() / (self.asr_den * self.u.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> RealTensor {
        RealTensor::vector(vec![v]).unwrap()
    }

    #[test]
    fn silent_neuron_stays_at_rest() {
        let mut n = NeuronState::new(&[1], LifParams::default());
        let s = n.lif_step(&scalar(0.0)).unwrap();
        assert_eq!(s.count(), 0);
        assert_eq!(n.membrane().data(), &[0.0]);
    }

    #[test]
    fn constant_drive_spike_times() {
        // Scalar oracle: integrate 0.4 per step, fire when strictly above 1.
        let mut oracle_u: f64 = 0.0;
        let mut oracle = Vec::new();
        for t in 1..=12 {
            oracle_u += 0.4;
            if oracle_u > 1.0 {
                oracle_u -= 1.0;
                oracle.push(t);
            }
        }
        let mut n = NeuronState::new(&[1], LifParams::integrate_and_fire(1.0).unwrap());
        let fired: Vec<usize> = (1..=12)
            .filter(|_| n.lif_step(&scalar(0.4)).unwrap().count() == 1)
            .collect();
        assert_eq!(fired, oracle);

        // 0.4 is not representable, so the f64 run fires at step 5 (1.0000000000000002 > 1).
        // In exactly representable units (threshold 10, drive 4) the schedule is 3, 6, 8.
        let mut n = NeuronState::new(&[1], LifParams::integrate_and_fire(10.0).unwrap());
        let fired: Vec<usize> = (1..=8)
            .filter(|_| n.lif_step(&scalar(4.0)).unwrap().count() == 1)
            .collect();
        assert_eq!(fired, vec![3, 6, 8]);
        assert_eq!(n.membrane().data(), &[2.0]);
    }

    #[test]
    fn strong_single_pulse_leaves_residual() {
        let mut n = NeuronState::new(&[1], LifParams::new(1.0, 0.99).unwrap());
        let s = n.lif_step(&scalar(2.5)).unwrap();
        assert_eq!(s.count(), 1);
        assert_eq!(n.membrane().data(), &[1.5]);
    }

    #[test]
    fn asr_examples() {
        let mut n = NeuronState::new(&[2], LifParams::new(1.0, 0.7).unwrap());
        let ones = SpikeTensor::from_bits(vec![2], vec![true, true]).unwrap();
        for _ in 0..5 {
            n.t += 1;
            n.asr_update(&ones).unwrap();
            assert_eq!(n.asr().unwrap().data(), &[1.0, 1.0]);
        }

        let mut n = NeuronState::new(&[1], LifParams::integrate_and_fire(1.0).unwrap());
        for b in [true, false, true, false] {
            n.t += 1;
            n.asr_update(&SpikeTensor::from_bits(vec![1], vec![b]).unwrap()).unwrap();
        }
        assert_eq!(n.asr().unwrap().data(), &[0.5]);

        let mut n = NeuronState::new(&[1], LifParams::new(1.0, 0.5).unwrap());
        for b in [true, false] {
            n.t += 1;
            n.asr_update(&SpikeTensor::from_bits(vec![1], vec![b]).unwrap()).unwrap();
        }
        assert!((n.asr().unwrap().data()[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn asr_after_single_step() {
        let mut n = NeuronState::new(&[2], LifParams::default());
        n.step(&RealTensor::vector(vec![1.5, 0.2]).unwrap()).unwrap();
        assert_eq!(n.asr().unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn asr_before_first_step_is_an_error() {
        let n = NeuronState::new(&[1], LifParams::default());
        assert!(matches!(n.asr(), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut n = NeuronState::new(&[2], LifParams::default());
        assert!(matches!(n.lif_step(&scalar(1.0)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(LifParams::new(0.0, 1.0).is_err());
        assert!(LifParams::new(1.0, 0.0).is_err());
        assert!(LifParams::new(1.0, 1.01).is_err());
        assert!(LifParams::new(0.25, 0.8).is_ok());
    }

    #[test]
    fn non_binary_real_rejected() {
        let t = RealTensor::vector(vec![0.0, 1.0, 0.5]).unwrap();
        assert!(SpikeTensor::from_real(&t).is_err());
        let t = RealTensor::vector(vec![0.0, 1.0]).unwrap();
        assert_eq!(SpikeTensor::from_real(&t).unwrap().to_real(), t);
    }
}
