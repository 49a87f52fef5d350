//! Fully connected network with rectifier hidden layers, an identity output
//! layer sized `|class_set| + 1` (slot 0 is background), and per-layer freeze flags.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed;

/// A dense layer; `weights` is `outputs × inputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub frozen: bool,
}

impl Layer {
    fn init(inputs: usize, outputs: usize, init_scale: f64, rng: &mut seed::Rng) -> Self {
        let s = init_scale / (inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 })
            .collect();
        Layer {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
            frozen: false,
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.inputs).zip(&self.bias).map(|(row, b)| {
            row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b
        }));
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
    class_set: Vec<usize>,
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub logits: Vec<f64>,
    /// Input to the output layer: the last hidden activations, or the raw input
    /// for single-layer models.
    pub hidden: Vec<f64>,
}

impl MlpModel {
    /// `layer_dims` is `[d, h1, .., hH, K]` with `K = class_set.len() + 1`.
    /// Weights are uniform in `±init_scale/√fan_in`, biases zero.
    pub fn init(layer_dims: &[usize], class_set: Vec<usize>, init_scale: f64, seed: u64) -> Result<Self> {
        if class_set.is_empty() {
            return Err(Error::config("class_set must not be empty"));
        }
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::config("layer_dims needs at least two entries, all >= 1"));
        }
        let out = *layer_dims.last().expect("len >= 2");
        if out != class_set.len() + 1 {
            return Err(Error::config(format!(
                "output width {out} does not match {} classes + background",
                class_set.len()
            )));
        }
        if !(init_scale >= 0.0 && init_scale.is_finite()) {
            return Err(Error::config("init_scale must be finite and >= 0"));
        }
        let mut rng = seed::rng(seed);
        let layers = layer_dims
            .windows(2)
            .map(|w| Layer::init(w[0], w[1], init_scale, &mut rng))
            .collect();
        Ok(MlpModel { layers, class_set })
    }

    /// Convenience: input dim, hidden widths, and the class set determine `layer_dims`.
    pub fn with_hidden(input: usize, hidden: &[usize], class_set: Vec<usize>, init_scale: f64, seed: u64) -> Result<Self> {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(class_set.len() + 1);
        Self::init(&dims, class_set, init_scale, seed)
    }

    pub fn from_layers(layers: Vec<Layer>, class_set: Vec<usize>) -> Result<Self> {
        if class_set.is_empty() || layers.is_empty() {
            return Err(Error::config("model needs layers and a non-empty class_set"));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::config("adjacent layer widths disagree"));
            }
        }
        for l in &layers {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::config("layer parameter count does not match its shape"));
            }
        }
        if layers.last().expect("non-empty").outputs != class_set.len() + 1 {
            return Err(Error::config("output width does not match class_set"));
        }
        Ok(MlpModel { layers, class_set })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].inputs];
        dims.extend(self.layers.iter().map(|l| l.outputs));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty").outputs
    }

    /// Width of the vector returned by [`MlpModel::extract_features`].
    pub fn feature_dim(&self) -> usize {
        self.layers.last().expect("non-empty").inputs
    }

    pub fn class_set(&self) -> &[usize] {
        &self.class_set
    }

    /// Output slot of a label: 0 for background, `1 + position` for members
    /// of the class set, `None` otherwise.
    pub fn target_of(&self, label: usize) -> Option<usize> {
        if label == 0 {
            return Some(0);
        }
        self.class_set.iter().position(|&c| c == label).map(|p| p + 1)
    }

    pub fn freeze_mask(&self) -> Vec<bool> {
        self.layers.iter().map(|l| l.frozen).collect()
    }

    pub fn set_freeze_mask(&mut self, mask: &[bool]) -> Result<()> {
        if mask.len() != self.layers.len() {
            return Err(Error::config(format!(
                "freeze mask has {} entries for {} layers",
                mask.len(),
                self.layers.len()
            )));
        }
        for (l, &f) in self.layers.iter_mut().zip(mask) {
            l.frozen = f;
        }
        Ok(())
    }

    /// Freeze the lowest `n` layers and unfreeze the rest.
    pub fn freeze_lowest(&mut self, n: usize) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.frozen = i < n;
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn check_input(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: features.len(),
            });
        }
        Ok(())
    }

    /// Activations of every layer: `[input, h1, .., hH, logits]`.
    pub fn activations(&self, features: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(features)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(features.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.apply(acts.last().expect("non-empty"), &mut out);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        Ok(acts)
    }

    pub fn forward(&self, features: &[f64]) -> Result<Forward> {
        let mut acts = self.activations(features)?;
        let logits = acts.pop().expect("output layer");
        let hidden = acts.pop().expect("input or hidden layer");
        Ok(Forward { logits, hidden })
    }

    /// Last hidden activations, L2-normalized when `normalize` (a zero vector stays zero).
    pub fn extract_features(&self, features: &[f64], normalize: bool) -> Result<Vec<f64>> {
        self.check_input(features)?;
        let mut cur = features.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers[..self.layers.len() - 1] {
            layer.apply(&cur, &mut next);
            next.iter_mut().for_each(|v| *v = v.max(0.0));
            std::mem::swap(&mut cur, &mut next);
        }
        if normalize {
            l2_normalize(&mut cur);
        }
        Ok(cur)
    }

    /// Child model for `class_subset`: hidden layers and freeze flags copied
    /// bit-exactly, output layer freshly initialized at width `|subset| + 1`.
    pub fn spawn_child(&self, class_subset: Vec<usize>, init_scale: f64, seed: u64) -> Result<Self> {
        if class_subset.is_empty() {
            return Err(Error::config("class subset must not be empty"));
        }
        let mut rng = seed::rng(seed);
        let old_head = self.layers.last().expect("non-empty");
        let mut head = Layer::init(old_head.inputs, class_subset.len() + 1, init_scale, &mut rng);
        head.frozen = old_head.frozen;
        let mut layers = self.layers[..self.layers.len() - 1].to_vec();
        layers.push(head);
        Ok(MlpModel {
            layers,
            class_set: class_subset,
        })
    }

    /// `MLP1` text serialization.
    pub fn to_text(&self) -> String {
        let mut s = String::from("MLP1\n");
        let join = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(" ");
        let _ = writeln!(
            s,
            "class_set {} {}",
            self.class_set.len(),
            join(&mut self.class_set.iter().map(|c| c.to_string()))
        );
        let dims = self.layer_dims();
        let _ = writeln!(s, "layer_dims {} {}", dims.len(), join(&mut dims.iter().map(|d| d.to_string())));
        let _ = writeln!(
            s,
            "freeze_mask {} {}",
            self.layers.len(),
            join(&mut self.layers.iter().map(|l| u8::from(l.frozen).to_string()))
        );
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(s, "layer {i} {} {}", l.outputs, l.inputs);
            for row in l.weights.chunks_exact(l.inputs) {
                let _ = writeln!(s, "{}", join(&mut row.iter().map(|v| format!("{v:?}"))));
            }
            let _ = writeln!(s, "bias {}", join(&mut l.bias.iter().map(|v| format!("{v:?}"))));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        let mut next = |what: &str| lines.next().ok_or_else(|| Error::parse(0, format!("unexpected end of model file, expected {what}")));
        let (ln, magic) = next("header")?;
        if magic != "MLP1" {
            return Err(Error::parse(ln, "expected MLP1 header"));
        }
        let class_set = parse_counted::<usize>(next("class_set")?, "class_set")?;
        let dims = parse_counted::<usize>(next("layer_dims")?, "layer_dims")?;
        let mask = parse_counted::<u8>(next("freeze_mask")?, "freeze_mask")?;
        if dims.len() < 2 || mask.len() != dims.len() - 1 {
            return Err(Error::parse(ln, "layer_dims / freeze_mask lengths disagree"));
        }
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            let (hl, header) = next("layer header")?;
            let expect = format!("layer {i} {} {}", w[1], w[0]);
            if header.split_whitespace().collect::<Vec<_>>().join(" ") != expect {
                return Err(Error::parse(hl, format!("expected '{expect}'")));
            }
            let mut weights = Vec::with_capacity(w[0] * w[1]);
            for _ in 0..w[1] {
                let (rl, row) = next("weight row")?;
                let vals = parse_floats(rl, row)?;
                if vals.len() != w[0] {
                    return Err(Error::parse(rl, "dimension mismatch"));
                }
                weights.extend(vals);
            }
            let (bl, bias_line) = next("bias")?;
            let rest = bias_line
                .strip_prefix("bias")
                .ok_or_else(|| Error::parse(bl, "expected bias line"))?;
            let bias = parse_floats(bl, rest)?;
            if bias.len() != w[1] {
                return Err(Error::parse(bl, "dimension mismatch"));
            }
            layers.push(Layer {
                inputs: w[0],
                outputs: w[1],
                weights,
                bias,
                frozen: mask[i] != 0,
            });
        }
        Self::from_layers(layers, class_set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Parse `"<key> <n> v1 .. vn"`.
pub(crate) fn parse_counted<T: std::str::FromStr>((ln, line): (usize, &str), key: &str) -> Result<Vec<T>> {
    let mut tok = line.split_whitespace();
    if tok.next() != Some(key) {
        return Err(Error::parse(ln, format!("expected '{key}'")));
    }
    let n: usize = tok
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::parse(ln, format!("malformed {key} count")))?;
    let vals = tok
        .map(|t| t.parse::<T>().map_err(|_| Error::parse(ln, format!("malformed {key} entry '{t}'"))))
        .collect::<Result<Vec<T>>>()?;
    if vals.len() != n {
        return Err(Error::parse(ln, format!("{key} declares {n} entries, found {}", vals.len())));
    }
    Ok(vals)
}

/// Whitespace-separated reals; `-inf` maps to the sentinel.
pub(crate) fn parse_floats(ln: usize, line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| {
            if t == "-inf" {
                return Ok(crate::SENTINEL);
            }
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(ln, format!("malformed number '{t}'")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle_forward(m: &MlpModel, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let n = m.layers().len();
        for (k, l) in m.layers().iter().enumerate() {
            let mut z = vec![0.0; l.outputs];
            for o in 0..l.outputs {
                let mut acc = l.bias[o];
                for i in 0..l.inputs {
                    acc += l.weights[o * l.inputs + i] * a[i];
                }
                z[o] = if k + 1 < n && acc < 0.0 { 0.0 } else { acc };
            }
            a = z;
        }
        a
    }

    #[test]
    fn init_is_deterministic_and_sized() {
        let a = MlpModel::init(&[5, 8, 5], vec![1, 2, 3, 4], 1.0, 3).unwrap();
        let b = MlpModel::init(&[5, 8, 5], vec![1, 2, 3, 4], 1.0, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.output_width(), 5);
        assert!(MlpModel::init(&[5, 8, 5], vec![], 1.0, 3).is_err());
        assert!(MlpModel::init(&[5, 8, 4], vec![1, 2, 3, 4], 1.0, 3).is_err());
        let bound = 1.0 / 5f64.sqrt();
        assert!(a.layers()[0].weights.iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn zero_scale_gives_zero_logits() {
        let m = MlpModel::init(&[3, 4, 3], vec![1, 2], 0.0, 1).unwrap();
        let f = m.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(f.logits, vec![0.0; 3]);
        assert_eq!(m.extract_features(&[1.0, 2.0, 3.0], true).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn identity_single_layer() {
        let mut m = MlpModel::init(&[3, 3], vec![1, 2], 1.0, 1).unwrap();
        let l = &mut m.layers_mut()[0];
        l.weights = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let f = m.forward(&[0.5, -1.5, 2.0]).unwrap();
        assert_eq!(f.logits, vec![0.5, -1.5, 2.0]);
        assert_eq!(f.hidden, vec![0.5, -1.5, 2.0]);
    }

    #[test]
    fn forward_matches_hand_oracle() {
        let m = MlpModel::init(&[6, 7, 5, 4], vec![1, 2, 3], 1.5, 42).unwrap();
        let x = [0.3, -1.2, 0.8, 2.0, -0.1, 0.05];
        let got = m.forward(&x).unwrap().logits;
        for (a, b) in got.iter().zip(oracle_forward(&m, &x)) {
            assert!((a - b).abs() <= 1e-9);
        }
        assert!(matches!(m.forward(&[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn features_are_unit_or_zero() {
        let m = MlpModel::init(&[4, 6, 3], vec![1, 2], 1.0, 5).unwrap();
        for k in 0..20 {
            let x: Vec<f64> = (0..4).map(|i| ((i * 7 + k * 3) % 11) as f64 - 5.0).collect();
            let f = m.extract_features(&x, true).unwrap();
            let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n == 0.0 || (n - 1.0).abs() < 1e-12);
            assert_eq!(f, m.extract_features(&x, true).unwrap());
        }
    }

    #[test]
    fn spawn_child_copies_hidden_layers() {
        let mut parent = MlpModel::init(&[4, 6, 5, 11], (1..=10).collect(), 1.0, 9).unwrap();
        parent.freeze_lowest(1);
        let child = parent.spawn_child(vec![2, 5, 7], 1.0, 10).unwrap();
        assert_eq!(child.output_width(), 4);
        assert_eq!(&child.layers()[..2], &parent.layers()[..2]);
        assert_eq!(child.freeze_mask(), parent.freeze_mask());
        let x = [0.1, 0.2, -0.3, 0.4];
        assert_eq!(child.extract_features(&x, true).unwrap(), parent.extract_features(&x, true).unwrap());
        assert!(parent.spawn_child(vec![], 1.0, 1).is_err());
        let wide = parent.spawn_child((1..=50).collect(), 1.0, 1).unwrap();
        assert_eq!(wide.output_width(), 51);
    }

    #[test]
    fn text_roundtrip() {
        let mut m = MlpModel::init(&[3, 4, 3], vec![4, 9], 1.0, 2).unwrap();
        m.freeze_lowest(1);
        let back = MlpModel::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert!(MlpModel::parse("MLP2\n").is_err());
    }
}
