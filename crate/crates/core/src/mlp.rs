//! Multi-layer perceptron with a float reference backend and a simulated
//! quantized-accelerator backend.
//!
//! Layer 1 is the input and passes through unchanged; every later layer `i`
//! computes `act_i(W_i a_{i-1} + b_i)`. The default shape is 784-128-10 with
//! sigmoid on the hidden and output layers.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::pipeline_sim::{Accelerator, PipelineConfig, SimReport};
use crate::quant::{quantize_tensor, Codebook, QuantizedTensor};
use crate::shift_arith::{ArithMode, FixedPointValue, ACTIVATION_FRAC_BITS, BIAS_WIDTH};

pub const DEFAULT_LAYER_SIZES: [usize; 3] = [784, 128, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Activation {
    #[default]
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Sigmoid => f.write_str("sigmoid"),
            Activation::Identity => f.write_str("identity"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Activation::Sigmoid),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::InvalidModel(format!("unknown activation {other:?}"))),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Piecewise-linear sigmoid over `[-8, 8]`, saturating outside.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmoidTable {
    lo: f64,
    hi: f64,
    step: f64,
    values: Vec<f64>,
}

impl SigmoidTable {
    pub const ENTRIES: usize = 1024;
    pub const RANGE: f64 = 8.0;

    pub fn new(entries: usize, range: f64) -> Self {
        assert!(entries >= 2 && range > 0.0);
        let step = 2.0 * range / (entries - 1) as f64;
        let values = (0..entries)
            .map(|k| sigmoid(-range + k as f64 * step))
            .collect();
        Self {
            lo: -range,
            hi: range,
            step,
            values,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        if x <= self.lo {
            return self.values[0];
        }
        if x >= self.hi {
            return *self.values.last().expect("non-empty table");
        }
        let pos = (x - self.lo) / self.step;
        let k = (pos.floor() as usize).min(self.values.len() - 2);
        let t = pos - k as f64;
        self.values[k] + (self.values[k + 1] - self.values[k]) * t
    }
}

impl Default for SigmoidTable {
    fn default() -> Self {
        Self::new(Self::ENTRIES, Self::RANGE)
    }
}

/// One weight layer: `rows x cols` row-major weights, `rows` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(rows: usize, cols: usize, activation: Activation) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
            activation,
        }
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.cols + j]
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.cols)
            .zip(&self.bias)
            .map(|(row, b)| {
                let z = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b;
                self.activation.apply(z)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_sizes: Vec<usize>,
    layers: Vec<Layer>,
}

impl MlpModel {
    pub fn new(layer_sizes: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidModel("an MLP needs at least two layers".into()));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::InvalidModel("layer sizes must be positive".into()));
        }
        if layers.len() != layer_sizes.len() - 1 {
            return Err(Error::InvalidModel(format!(
                "{} weight layers for {} layer sizes",
                layers.len(),
                layer_sizes.len()
            )));
        }
        for (i, (layer, pair)) in layers.iter().zip(layer_sizes.windows(2)).enumerate() {
            let ok = layer.cols == pair[0]
                && layer.rows == pair[1]
                && layer.weights.len() == pair[0] * pair[1]
                && layer.bias.len() == pair[1];
            if !ok {
                return Err(Error::InvalidModel(format!(
                    "layer {} should be {}x{} with {} biases",
                    i + 2,
                    pair[1],
                    pair[0],
                    pair[1]
                )));
            }
        }
        Ok(Self {
            layer_sizes,
            layers,
        })
    }

    /// All-zero parameters with one activation throughout.
    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        let layers = layer_sizes
            .windows(2)
            .map(|w| Layer::zeros(w[1], w[0], activation))
            .collect();
        Self::new(layer_sizes.to_vec(), layers)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().expect("at least two layers")
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_size() {
            return Err(Error::DimensionMismatch(format!(
                "input of length {} for a model expecting {}",
                x.len(),
                self.input_size()
            )));
        }
        if let Some(&bad) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(bad));
        }
        Ok(())
    }

    /// Float reference forward pass.
    pub fn forward_float(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        for layer in &self.layers {
            a = layer.forward(&a);
        }
        Ok(a)
    }

    /// Per-layer outputs for a row-major batch of `batch` inputs. Element 0
    /// is the input itself.
    pub fn forward_batch(&self, inputs: &[f64], batch: usize) -> Result<Vec<Vec<f64>>> {
        if inputs.len() != batch * self.input_size() {
            return Err(Error::DimensionMismatch(format!(
                "batch buffer of {} values for {batch} inputs of size {}",
                inputs.len(),
                self.input_size()
            )));
        }
        let mut outputs = vec![inputs.to_vec()];
        for layer in &self.layers {
            let prev = outputs.last().expect("input present");
            let mut z = vec![0.0; batch * layer.rows];
            gemm_abt(batch, layer.cols, layer.rows, prev, &layer.weights, &mut z);
            for row in z.chunks_exact_mut(layer.rows) {
                for (v, b) in row.iter_mut().zip(&layer.bias) {
                    *v = layer.activation.apply(*v + b);
                }
            }
            outputs.push(z);
        }
        Ok(outputs)
    }

    /// Weights quantized onto `codebook`, biases left in float.
    pub fn quantized(&self, codebook: &Codebook) -> Result<MlpModel> {
        let mut model = self.clone();
        for layer in &mut model.layers {
            if let Some(&bad) = layer.weights.iter().find(|w| !w.is_finite()) {
                return Err(Error::NonFinite(bad));
            }
            for w in &mut layer.weights {
                *w = codebook.level(codebook.quantize(*w));
            }
        }
        Ok(model)
    }

    pub fn max_abs_weight(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| &l.weights)
            .fold(0.0, |m, w| m.max(w.abs()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        fs::read_to_string(path)
            .map_err(|e| Error::io(path, e))?
            .parse()
    }
}

/// `c (m x n) = a (m x k) * b^T`, with `b` stored `n x k` row-major.
pub(crate) fn gemm_abt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    // SAFETY: the asserted lengths cover every element addressed through the
    // given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c (m x n) = a^T * b`, with `a` stored `k x m` and `b` stored `k x n`.
pub(crate) fn gemm_atb(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: as above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c (m x n) = a (m x k) * b (k x n)`, all row-major.
pub(crate) fn gemm_ab(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: as above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Index of the largest component; ties go to the lowest index.
pub fn classify(output: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in output.iter().enumerate().skip(1) {
        if v > output[best] {
            best = i;
        }
    }
    best
}

/// A model lowered onto the simulated accelerator: quantized weight codes,
/// fixed-point biases and a configured pipeline.
#[derive(Debug, Clone)]
pub struct QuantizedMlp {
    input_size: usize,
    weights: Vec<QuantizedTensor>,
    biases: Vec<Vec<FixedPointValue>>,
    activations: Vec<Activation>,
    accelerator: Accelerator,
}

impl QuantizedMlp {
    pub fn new(
        model: &MlpModel,
        codebook: &Arc<Codebook>,
        config: &PipelineConfig,
        mode: ArithMode,
    ) -> Result<Self> {
        let weights = model
            .layers
            .iter()
            .map(|l| quantize_tensor(&l.weights, &[l.rows, l.cols], codebook))
            .collect::<Result<Vec<_>>>()?;
        let biases = model
            .layers
            .iter()
            .map(|l| {
                l.bias
                    .iter()
                    .map(|&b| FixedPointValue::from_f64(b, ACTIVATION_FRAC_BITS, BIAS_WIDTH))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            input_size: model.input_size(),
            weights,
            biases,
            activations: model.layers.iter().map(|l| l.activation).collect(),
            accelerator: Accelerator::new(config.clone(), codebook, mode)?,
        })
    }

    pub fn weights(&self) -> &[QuantizedTensor] {
        &self.weights
    }

    pub fn accelerator(&self) -> &Accelerator {
        &self.accelerator
    }

    pub fn infer(&self, x: &[f64]) -> Result<(Vec<f64>, SimReport)> {
        if x.len() != self.input_size {
            return Err(Error::DimensionMismatch(format!(
                "input of length {} for a model expecting {}",
                x.len(),
                self.input_size
            )));
        }
        let mut a = x
            .iter()
            .map(|&v| FixedPointValue::activation(v))
            .collect::<Result<Vec<_>>>()?;
        let mut total = SimReport::default();
        for ((w, b), &act) in self.weights.iter().zip(&self.biases).zip(&self.activations) {
            let (out, report) = self.accelerator.layer(w, b, &a, act)?;
            total += report;
            a = out;
        }
        Ok((a.iter().map(FixedPointValue::to_f64).collect(), total))
    }
}

/// Quantizes the model against `codebook` and runs one input through the
/// simulated accelerator in exact arithmetic.
pub fn forward_simulated(
    model: &MlpModel,
    x: &[f64],
    codebook: &Arc<Codebook>,
    config: &PipelineConfig,
) -> Result<(Vec<f64>, SimReport)> {
    model.check_input(x)?;
    QuantizedMlp::new(model, codebook, config, ArithMode::Exact)?.infer(x)
}

impl fmt::Display for MlpModel {
    /// Weights are written with 17 significant digits, which round-trips
    /// every `f64` exactly.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sizes: Vec<String> = self.layer_sizes.iter().map(usize::to_string).collect();
        let acts: Vec<String> = self.layers.iter().map(|l| l.activation.to_string()).collect();
        let act = if acts.iter().all(|a| *a == acts[0]) {
            acts[0].clone()
        } else {
            acts.join(",")
        };
        writeln!(f, "layers={} activation={act}", sizes.join(","))?;
        for (i, layer) in self.layers.iter().enumerate() {
            writeln!(f, "W{}", i + 2)?;
            for row in layer.weights.chunks_exact(layer.cols) {
                write_values(f, row)?;
                writeln!(f)?;
            }
            write!(f, "b{} ", i + 2)?;
            write_values(f, &layer.bias)?;
            writeln!(f)?;
        }
        Ok(())
    }
}

fn write_values(f: &mut fmt::Formatter<'_>, values: &[f64]) -> fmt::Result {
    for (j, v) in values.iter().enumerate() {
        if j > 0 {
            f.write_str(" ")?;
        }
        write!(f, "{v:.16e}")?;
    }
    Ok(())
}

impl FromStr for MlpModel {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (hline, header) = lines.next().ok_or_else(|| Error::parse(1, "empty model file"))?;

        let mut sizes = None;
        let mut acts = None;
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("layers", v)) => {
                    sizes = Some(
                        v.split(',')
                            .map(|s| s.parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| Error::parse(hline, format!("bad layer sizes {v:?}")))?,
                    )
                }
                Some(("activation", v)) => {
                    acts = Some(
                        v.split(',')
                            .map(Activation::from_str)
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                _ => return Err(Error::parse(hline, format!("unexpected header field {field:?}"))),
            }
        }
        let sizes: Vec<usize> = sizes.ok_or_else(|| Error::parse(hline, "missing layers="))?;
        let acts = acts.ok_or_else(|| Error::parse(hline, "missing activation="))?;
        if sizes.len() < 2 {
            return Err(Error::parse(hline, "need at least two layer sizes"));
        }
        let n_layers = sizes.len() - 1;
        let acts = match acts.len() {
            1 => vec![acts[0]; n_layers],
            n if n == n_layers => acts,
            n => {
                return Err(Error::parse(
                    hline,
                    format!("{n} activations for {n_layers} weight layers"),
                ))
            }
        };

        let parse_row = |lineno: usize, s: &str, expected: usize| -> Result<Vec<f64>> {
            let values = s
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::parse(lineno, "bad number"))?;
            if values.len() != expected {
                return Err(Error::parse(
                    lineno,
                    format!("expected {expected} values, found {}", values.len()),
                ));
            }
            Ok(values)
        };

        let mut layers = Vec::with_capacity(n_layers);
        for (li, &activation) in acts.iter().enumerate() {
            let (cols, rows) = (sizes[li], sizes[li + 1]);
            let tag = format!("W{}", li + 2);
            match lines.next() {
                Some((_, l)) if l == tag => {}
                Some((n, l)) => return Err(Error::parse(n, format!("expected {tag}, found {l:?}"))),
                None => return Err(Error::parse(0, format!("missing {tag} block"))),
            }
            let mut weights = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (n, l) = lines
                    .next()
                    .ok_or_else(|| Error::parse(0, format!("{tag} block is truncated")))?;
                weights.extend(parse_row(n, l, cols)?);
            }
            let btag = format!("b{}", li + 2);
            let (n, l) = lines
                .next()
                .ok_or_else(|| Error::parse(0, format!("missing {btag} line")))?;
            let rest = l
                .strip_prefix(&btag)
                .ok_or_else(|| Error::parse(n, format!("expected {btag}, found {l:?}")))?;
            let bias = parse_row(n, rest, rows)?;
            layers.push(Layer {
                rows,
                cols,
                weights,
                bias,
                activation,
            });
        }
        if let Some((n, _)) = lines.next() {
            return Err(Error::parse(n, "trailing content after the last layer"));
        }
        MlpModel::new(sizes, layers)
    }
}
