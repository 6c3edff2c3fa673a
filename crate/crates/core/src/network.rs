//! The error-prediction network.
//!
//! Encoder: 7×7/2 convolution, 3×3/2 max pool, then four groups of
//! bottleneck blocks taking 64 channels at 16×24 down to 2048 channels at
//! 2×3. Decoder: five up-projection blocks back to 32 channels at 64×96 and
//! a 3×3 head producing one value per pixel.
//!
//! Two spatial irregularities in the reference layout are resolved by
//! trusting the listed output sizes: the first projection group keeps stride
//! 1 (16×24 in and out), and the last encoder group ends in an extra stride-2
//! projection so that it reaches 2×3×2048.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Checkpoint, Padding, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::raster::{FeatureImageSet, FeatureKind};

/// Which feature kinds are fed to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FeatureSelection {
    pub rgb: bool,
    pub inverse_depth: bool,
    pub area: bool,
    pub normal: bool,
    pub edge_ratio: bool,
    pub view_angle: bool,
}

impl FeatureSelection {
    pub const ALL: Self = Self {
        rgb: true,
        inverse_depth: true,
        area: true,
        normal: true,
        edge_ratio: true,
        view_angle: true,
    };

    pub const NONE: Self = Self {
        rgb: false,
        inverse_depth: false,
        area: false,
        normal: false,
        edge_ratio: false,
        view_angle: false,
    };

    pub fn enabled(&self, kind: FeatureKind) -> bool {
        match kind {
            FeatureKind::Rgb => self.rgb,
            FeatureKind::InverseDepth => self.inverse_depth,
            FeatureKind::Area => self.area,
            FeatureKind::Normal => self.normal,
            FeatureKind::EdgeRatio => self.edge_ratio,
            FeatureKind::ViewAngle => self.view_angle,
        }
    }

    pub fn set(&mut self, kind: FeatureKind, on: bool) {
        match kind {
            FeatureKind::Rgb => self.rgb = on,
            FeatureKind::InverseDepth => self.inverse_depth = on,
            FeatureKind::Area => self.area = on,
            FeatureKind::Normal => self.normal = on,
            FeatureKind::EdgeRatio => self.edge_ratio = on,
            FeatureKind::ViewAngle => self.view_angle = on,
        }
    }

    pub fn without(mut self, kind: FeatureKind) -> Self {
        self.set(kind, false);
        self
    }

    /// Enabled kinds in canonical channel order.
    pub fn kinds(&self) -> Vec<FeatureKind> {
        FeatureKind::ALL.into_iter().filter(|&k| self.enabled(k)).collect()
    }

    /// Number of network input channels.
    pub fn channel_count(&self) -> usize {
        self.kinds().iter().map(|k| k.components()).sum()
    }

    /// First input channel of `kind`, if enabled.
    pub fn channel_offset(&self, kind: FeatureKind) -> Option<usize> {
        if !self.enabled(kind) {
            return None;
        }
        Some(
            self.kinds()
                .iter()
                .take_while(|&&k| k != kind)
                .map(|k| k.components())
                .sum(),
        )
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        FeatureKind::ALL
            .iter()
            .all(|&k| !self.enabled(k) || other.enabled(k))
    }

    pub fn validate(&self) -> Result<()> {
        if self.kinds().is_empty() {
            Err(Error::Config("feature selection enables no features".into()))
        } else {
            Ok(())
        }
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.kinds().iter().map(|k| k.name()).collect()
    }

    /// Parses `all` or a comma-separated list of feature names.
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if text == "all" {
            return Ok(Self::ALL);
        }
        let mut sel = Self::NONE;
        for name in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let kind = FeatureKind::from_name(name)
                .ok_or_else(|| Error::Config(format!("unknown feature `{name}`")))?;
            sel.set(kind, true);
        }
        sel.validate()?;
        Ok(sel)
    }
}

impl Default for FeatureSelection {
    fn default() -> Self {
        Self::ALL
    }
}

impl std::fmt::Display for FeatureSelection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.names().join(","))
    }
}

/// Per-channel affine normalization applied to covered pixels before the
/// first layer. Uncovered pixels are fed as 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Mean and standard deviation of every selected channel over covered
    /// pixels of `sets`.
    pub fn fit(sel: &FeatureSelection, sets: &[&FeatureImageSet]) -> Self {
        let f = sel.channel_count();
        let mut sum = vec![0.0; f];
        let mut sq = vec![0.0; f];
        let mut n = 0usize;
        let kinds = sel.kinds();
        for set in sets {
            let mut values = vec![0.0f32; f];
            for p in 0..set.width() * set.height() {
                if !set.mask.data()[p] {
                    continue;
                }
                gather(&kinds, set, p, &mut values);
                for (c, &v) in values.iter().enumerate() {
                    sum[c] += v as f64;
                    sq[c] += v as f64 * v as f64;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Self::identity(f);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n as f64 - m * m).max(0.0);
                // constant channels pass through centred but unscaled
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    fn select(&self, from: &FeatureSelection, to: &FeatureSelection) -> Self {
        let mut out = Self {
            mean: Vec::new(),
            std: Vec::new(),
        };
        for kind in to.kinds() {
            let o = from.channel_offset(kind).expect("subset");
            for c in o..o + kind.components() {
                out.mean.push(self.mean[c]);
                out.std.push(self.std[c]);
            }
        }
        out
    }
}

fn gather(kinds: &[FeatureKind], set: &FeatureImageSet, pixel: usize, out: &mut [f32]) {
    let mut c = 0;
    for &kind in kinds {
        let n = kind.components();
        out[c..c + n].copy_from_slice(&set.channel(kind).data()[pixel * n..][..n]);
        c += n;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelOptions {
    /// Zero-initialize the prediction head so a fresh model predicts 0.
    pub zero_head: bool,
    /// Multiplier on the He-normal scale of the last convolution of every
    /// bottleneck branch. Without normalization layers, full-scale branches
    /// double the activation variance at every block.
    pub branch_scale: f64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            zero_head: true,
            branch_scale: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    kernel: usize,
    stride: usize,
}

#[derive(Debug, Clone)]
enum Block {
    Stem(Conv),
    Pool,
    Bottleneck {
        reduce: Conv,
        spatial: Conv,
        expand: Conv,
        shortcut: Option<Conv>,
    },
    UpProject {
        conv: Conv,
        shortcut: Conv,
    },
    Head(Conv),
}

#[derive(Debug, Clone)]
struct Layer {
    name: String,
    /// Index of the layout row this block belongs to.
    row: usize,
    block: Block,
}

/// Row labels of the layout, in order; row 0 is the input.
pub const ROW_LABELS: [&str; 13] = [
    "Input",
    "Convolution",
    "Max Pool",
    "Residual, Residual, Projection",
    "Residual, Residual, Projection",
    "Residual, Residual, Projection",
    "Residual, Residual",
    "Up-projection",
    "Up-projection",
    "Up-projection",
    "Up-projection",
    "Up-projection",
    "Convolution",
];

/// Output shape of one block from a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockShape {
    pub name: String,
    pub row: usize,
    pub shape: [usize; 4],
}

const GROUPS: [(usize, usize, usize); 4] = [
    // (input channels, output channels, projection stride)
    (64, 256, 1),
    (256, 512, 2),
    (512, 1024, 2),
    (1024, 2048, 2),
];
/// Total downsampling factor of the encoder; input sides must be multiples.
pub const NETWORK_STRIDE: usize = 32;

const UP_CHANNELS: [usize; 6] = [2048, 1024, 512, 256, 128, 32];

struct Builder<'a, T: Scalar> {
    params: &'a mut ParamStore<T>,
    rng: Option<ChaCha8Rng>,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, stride: usize, scale: f64) -> Conv {
        let shape = [k, k, cin, cout];
        let n: usize = shape.iter().product();
        let data = match (&mut self.rng, scale) {
            (Some(rng), s) if s > 0.0 => {
                let std = s * (2.0 / (k * k * cin) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| T::from_f64(normal.sample(rng))).collect()
            }
            _ => vec![T::zero(); n],
        };
        let weight = self
            .params
            .add(format!("{name}.w"), Tensor::from_vec(shape, data).expect("sized"));
        let bias = self.params.add(format!("{name}.b"), Tensor::zeros([1, 1, 1, cout]));
        Conv {
            weight,
            bias,
            kernel: k,
            stride,
        }
    }

    fn bottleneck(&mut self, name: &str, cin: usize, cout: usize, stride: usize, branch_scale: f64) -> Block {
        let mid = cout / 8;
        // CReLU doubles the width seen by the next convolution
        Block::Bottleneck {
            reduce: self.conv(&format!("{name}.reduce"), 1, cin, mid, 1, 1.0),
            spatial: self.conv(&format!("{name}.spatial"), 3, 2 * mid, mid, stride, 1.0),
            expand: self.conv(&format!("{name}.expand"), 1, 2 * mid, cout, 1, branch_scale),
            shortcut: (cin != cout || stride != 1)
                .then(|| self.conv(&format!("{name}.shortcut"), 1, cin, cout, stride, 1.0)),
        }
    }
}

/// Network weights, layout, and input conventions.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    selection: FeatureSelection,
    norm: InputNorm,
    options: ModelOptions,
    params: ParamStore<T>,
    layers: Vec<Layer>,
}

impl<T: Scalar> Model<T> {
    pub fn build(sel: FeatureSelection, seed: u64) -> Result<Self> {
        Self::build_with(sel, seed, ModelOptions::default())
    }

    pub fn build_with(sel: FeatureSelection, seed: u64, options: ModelOptions) -> Result<Self> {
        sel.validate()?;
        Ok(Self::assemble(sel, Some(ChaCha8Rng::seed_from_u64(seed)), options))
    }

    fn assemble(sel: FeatureSelection, rng: Option<ChaCha8Rng>, options: ModelOptions) -> Self {
        let mut params = ParamStore::new();
        let mut b = Builder {
            params: &mut params,
            rng,
        };
        let mut layers = Vec::new();
        let mut push = |name: String, row: usize, block: Block| layers.push(Layer { name, row, block });

        push("stem".into(), 1, Block::Stem(b.conv("stem", 7, sel.channel_count(), 64, 2, 1.0)));
        push("pool".into(), 2, Block::Pool);
        for (g, &(cin, cout, stride)) in GROUPS.iter().enumerate() {
            let row = 3 + g;
            for r in 0..2 {
                let name = format!("group{}.res{}", g + 1, r + 1);
                push(name.clone(), row, b.bottleneck(&name, cin, cin, 1, options.branch_scale));
            }
            let name = format!("group{}.proj", g + 1);
            push(name.clone(), row, b.bottleneck(&name, cin, cout, stride, options.branch_scale));
        }
        for (u, pair) in UP_CHANNELS.windows(2).enumerate() {
            let name = format!("up{}", u + 1);
            let block = Block::UpProject {
                conv: b.conv(&format!("{name}.conv"), 3, pair[0], pair[1], 1, 1.0),
                shortcut: b.conv(&format!("{name}.shortcut"), 1, pair[0], pair[1], 1, 1.0),
            };
            push(name, 7 + u, block);
        }
        let head_scale = if options.zero_head { 0.0 } else { 1.0 };
        push("head".into(), 12, Block::Head(b.conv("head", 3, 32, 1, 1, head_scale)));

        Self {
            selection: sel,
            norm: InputNorm::identity(sel.channel_count()),
            options,
            params,
            layers,
        }
    }

    pub fn selection(&self) -> FeatureSelection {
        self.selection
    }

    pub fn input_channels(&self) -> usize {
        self.selection.channel_count()
    }

    pub fn options(&self) -> ModelOptions {
        self.options
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn norm(&self) -> &InputNorm {
        &self.norm
    }

    pub fn set_norm(&mut self, norm: InputNorm) -> Result<()> {
        let f = self.input_channels();
        if norm.mean.len() != f || norm.std.len() != f {
            return Err(Error::Shape(format!("normalization for {} channels, model has {f}", norm.mean.len())));
        }
        if norm.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) || norm.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Numerical("normalization statistics must be finite with positive std".into()));
        }
        self.norm = norm;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Parameters of the first convolution (weights and biases).
    pub fn first_layer_param_count(&self) -> usize {
        match &self.layers[0].block {
            Block::Stem(c) => self.params.get(c.weight).len() + self.params.get(c.bias).len(),
            _ => unreachable!("first layer is the stem"),
        }
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            selection: self.selection,
            norm: self.norm.clone(),
            options: self.options,
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    /// Network input for a batch of feature sets: selected channels,
    /// normalized, zero outside coverage. Kinds in `disabled` are fed as 0,
    /// i.e. as their training mean.
    pub fn assemble_input(&self, sets: &[&FeatureImageSet], disabled: &[FeatureKind]) -> Result<Tensor<T>> {
        let first = sets.first().ok_or_else(|| Error::Empty("no feature sets in batch".into()))?;
        let (w, h) = (first.width(), first.height());
        let f = self.input_channels();
        let mut zeroed = vec![false; f];
        for &kind in disabled {
            if let Some(o) = self.selection.channel_offset(kind) {
                zeroed[o..o + kind.components()].iter_mut().for_each(|z| *z = true);
            }
        }
        let mut data = Vec::with_capacity(sets.len() * w * h * f);
        let mut values = vec![0.0f32; f];
        let kinds = self.selection.kinds();
        for set in sets {
            if set.width() != w || set.height() != h {
                return Err(Error::Shape("feature sets in a batch differ in size".into()));
            }
            for p in 0..w * h {
                if !set.mask.data()[p] {
                    data.extend(std::iter::repeat_n(T::zero(), f));
                    continue;
                }
                gather(&kinds, set, p, &mut values);
                for c in 0..f {
                    let v = if zeroed[c] {
                        0.0
                    } else {
                        (values[c] as f64 - self.norm.mean[c]) / self.norm.std[c]
                    };
                    data.push(T::from_f64(v));
                }
            }
        }
        Tensor::from_vec([sets.len(), h, w, f], data)
    }

    fn conv(&self, tape: &mut Tape<'_, T>, x: Var, c: &Conv) -> Result<Var> {
        let w = tape.param(c.weight);
        let b = tape.param(c.bias);
        tape.conv2d(x, w, Some(b), c.stride, Padding::Same)
    }

    /// Records a forward pass on `tape`, which must have been created over
    /// this model's parameters. Returns the prediction and every block's
    /// output shape.
    pub fn forward(&self, tape: &mut Tape<'_, T>, input: Var) -> Result<(Var, Vec<BlockShape>)> {
        debug_assert!(std::ptr::eq(tape.params(), &self.params), "tape over foreign parameters");
        let shape = tape.shape(input);
        if shape[3] != self.input_channels() {
            return Err(Error::Shape(format!(
                "input has {} channels, model expects {} ({})",
                shape[3],
                self.input_channels(),
                self.selection
            )));
        }
        if shape[1] % NETWORK_STRIDE != 0 || shape[2] % NETWORK_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "input size {}x{} is not a multiple of 32",
                shape[1], shape[2]
            )));
        }
        let mut shapes = vec![BlockShape {
            name: "input".into(),
            row: 0,
            shape,
        }];
        let mut x = input;
        for layer in &self.layers {
            x = match &layer.block {
                Block::Stem(c) => {
                    let y = self.conv(tape, x, c)?;
                    tape.relu(y)
                }
                Block::Pool => tape.max_pool(x, 3, 2)?,
                Block::Bottleneck {
                    reduce,
                    spatial,
                    expand,
                    shortcut,
                } => {
                    let h = self.conv(tape, x, reduce)?;
                    let h = tape.crelu(h);
                    let h = self.conv(tape, h, spatial)?;
                    let h = tape.crelu(h);
                    let h = self.conv(tape, h, expand)?;
                    let s = match shortcut {
                        Some(c) => self.conv(tape, x, c)?,
                        None => x,
                    };
                    tape.add(h, s)?
                }
                Block::UpProject { conv, shortcut } => {
                    let u = tape.unpool_nn(x);
                    let a = self.conv(tape, u, conv)?;
                    // 1×1 convolution commutes with nearest unpooling; applying
                    // it first is exact and four times cheaper
                    let s = self.conv(tape, x, shortcut)?;
                    let s = tape.unpool_nn(s);
                    let y = tape.add(a, s)?;
                    tape.relu(y)
                }
                Block::Head(c) => self.conv(tape, x, c)?,
            };
            shapes.push(BlockShape {
                name: layer.name.clone(),
                row: layer.row,
                shape: tape.shape(x),
            });
        }
        Ok((x, shapes))
    }

    /// Prediction for a prepared input batch, shape `[n, h, w, 1]`.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new(&self.params);
        let x = tape.input(input.clone());
        let (y, _) = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// Output shape of the last block of each layout row for an `h`×`w`
    /// input.
    pub fn row_shapes(&self, h: usize, w: usize) -> Result<Vec<[usize; 4]>> {
        let mut tape = Tape::new(&self.params);
        let x = tape.input(Tensor::zeros([1, h, w, self.input_channels()]));
        let (_, shapes) = self.forward(&mut tape, x)?;
        let mut rows = vec![[0; 4]; ROW_LABELS.len()];
        for s in shapes {
            rows[s.row] = s.shape;
        }
        Ok(rows)
    }

    /// Side length (input pixels) of the receptive field of one output pixel,
    /// along the deepest path through the network.
    pub fn receptive_field(&self) -> f64 {
        let (mut r, mut j) = (1.0, 1.0);
        let conv = |c: &Conv, r: &mut f64, j: &mut f64| {
            *r += (c.kernel as f64 - 1.0) * *j;
            *j *= c.stride as f64;
        };
        for layer in &self.layers {
            match &layer.block {
                Block::Stem(c) | Block::Head(c) => conv(c, &mut r, &mut j),
                Block::Pool => {
                    r += 2.0 * j;
                    j *= 2.0;
                }
                Block::Bottleneck {
                    reduce,
                    spatial,
                    expand,
                    ..
                } => {
                    conv(reduce, &mut r, &mut j);
                    conv(spatial, &mut r, &mut j);
                    conv(expand, &mut r, &mut j);
                }
                Block::UpProject { conv: c, .. } => {
                    j /= 2.0;
                    conv(c, &mut r, &mut j);
                }
            }
        }
        r
    }

    /// Copy restricted to `reduced` input features: the first layer's
    /// weight slices for dropped channels are removed, everything else is
    /// kept.
    pub fn drop_features(&self, reduced: FeatureSelection) -> Result<Self> {
        reduced.validate()?;
        if !reduced.is_subset_of(&self.selection) {
            return Err(Error::Config(format!(
                "selection `{reduced}` is not a subset of the model's `{}`",
                self.selection
            )));
        }
        let keep: Vec<usize> = reduced
            .kinds()
            .iter()
            .flat_map(|&k| {
                let o = self.selection.channel_offset(k).expect("subset");
                o..o + k.components()
            })
            .collect();
        let stem_weight = match &self.layers[0].block {
            Block::Stem(c) => c.weight,
            _ => unreachable!("first layer is the stem"),
        };
        let mut params = ParamStore::new();
        for (id, p) in self.params.iter() {
            let value = if id == stem_weight {
                let [kh, kw, cin, cout] = p.value.shape();
                let mut data = Vec::with_capacity(kh * kw * keep.len() * cout);
                for tap in p.value.data().chunks_exact(cin * cout) {
                    for &c in &keep {
                        data.extend_from_slice(&tap[c * cout..(c + 1) * cout]);
                    }
                }
                Tensor::from_vec([kh, kw, keep.len(), cout], data)?
            } else {
                p.value.clone()
            };
            params.add(p.name.clone(), value);
        }
        Ok(Self {
            selection: reduced,
            norm: self.norm.select(&self.selection, &reduced),
            options: self.options,
            params,
            layers: self.layers.clone(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let metadata = serde_json::json!({
            "architecture": "residual-upproj-v1",
            "features": self.selection.names(),
            "norm": self.norm,
            "options": self.options,
        });
        Checkpoint {
            params: self.params.clone(),
            metadata,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        let bad = |msg: String| Error::Parse {
            origin: "checkpoint".into(),
            line: 0,
            msg,
        };
        let meta = &ckpt.metadata;
        if meta["architecture"] != "residual-upproj-v1" {
            return Err(bad(format!("unknown architecture {}", meta["architecture"])));
        }
        let names: Vec<String> = serde_json::from_value(meta["features"].clone())
            .map_err(|e| bad(format!("features: {e}")))?;
        let sel = FeatureSelection::parse(&names.join(","))?;
        let norm: InputNorm =
            serde_json::from_value(meta["norm"].clone()).map_err(|e| bad(format!("norm: {e}")))?;
        let options: ModelOptions =
            serde_json::from_value(meta["options"].clone()).map_err(|e| bad(format!("options: {e}")))?;
        let mut model = Self::assemble(sel, None, options);
        if model.params.len() != ckpt.params.len() {
            return Err(bad(format!(
                "{} tensors, architecture needs {}",
                ckpt.params.len(),
                model.params.len()
            )));
        }
        for ((_, want), (_, got)) in model.params.iter().zip(ckpt.params.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(bad(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        model.params = ckpt.params;
        model.set_norm(norm)?;
        Ok(model)
    }

    /// Fails unless `sel` equals the selection the model was trained with.
    pub fn check_selection(&self, sel: &FeatureSelection) -> Result<()> {
        if *sel != self.selection {
            return Err(Error::Config(format!(
                "model was trained on features `{}`, got `{sel}`",
                self.selection
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_channel_counts() {
        assert_eq!(FeatureSelection::ALL.channel_count(), 10);
        let sel = FeatureSelection::ALL.without(FeatureKind::Rgb);
        assert_eq!(sel.channel_count(), 7);
        assert_eq!(sel.channel_offset(FeatureKind::Normal), Some(2));
        assert_eq!(FeatureSelection::ALL.channel_offset(FeatureKind::ViewAngle), Some(9));
        assert!(FeatureSelection::NONE.validate().is_err());
        assert_eq!(FeatureSelection::parse("normal, rgb").unwrap().names(), vec!["rgb", "normal"]);
        assert!(FeatureSelection::parse("depth").is_err());
        assert_eq!(FeatureSelection::parse("all").unwrap(), FeatureSelection::ALL);
    }

    #[test]
    fn equal_seeds_equal_weights() {
        let a = Model::<f32>::build(FeatureSelection::ALL, 3).unwrap();
        let b = Model::<f32>::build(FeatureSelection::ALL, 3).unwrap();
        let c = Model::<f32>::build(FeatureSelection::ALL, 4).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        assert_eq!(a.param_count(), c.param_count());
    }

    #[test]
    fn drop_features_slices_first_layer() {
        let m = Model::<f32>::build(FeatureSelection::ALL, 1).unwrap();
        let d = m.drop_features(FeatureSelection::ALL.without(FeatureKind::Rgb)).unwrap();
        assert_eq!(m.first_layer_param_count() - d.first_layer_param_count(), 3 * 7 * 7 * 64);
        assert_eq!(m.param_count() - d.param_count(), 3 * 7 * 7 * 64);
        // surviving slices are copied verbatim: channel 3 of m is channel 0 of d
        let (wm, wd) = (m.params().get(ParamId(0)), d.params().get(ParamId(0)));
        for tap in 0..49 {
            for o in 0..64 {
                assert_eq!(wm.data()[(tap * 10 + 3) * 64 + o], wd.data()[(tap * 7) * 64 + o]);
            }
        }
        let same = m.drop_features(FeatureSelection::ALL).unwrap();
        assert_eq!(same.params(), m.params());
        assert!(d.drop_features(FeatureSelection::ALL).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let sel = FeatureSelection::parse("inverse_depth,normal").unwrap();
        let mut m = Model::<f32>::build(sel, 5).unwrap();
        m.set_norm(InputNorm {
            mean: vec![0.5, 0.0, 0.1, -0.2],
            std: vec![0.25, 1.0, 2.0, 0.5],
        })
        .unwrap();
        let bytes = m.to_checkpoint().to_bytes();
        let back = Model::<f32>::from_checkpoint(Checkpoint::from_bytes(&bytes, "m").unwrap()).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.norm(), m.norm());
        assert_eq!(back.selection(), sel);
        assert!(back.check_selection(&FeatureSelection::ALL).is_err());
    }

    #[test]
    fn assemble_input_normalizes_and_masks() {
        let sel = FeatureSelection::parse("inverse_depth,area").unwrap();
        let mut m = Model::<f64>::build(sel, 0).unwrap();
        m.set_norm(InputNorm {
            mean: vec![1.0, 0.0],
            std: vec![2.0, 1.0],
        })
        .unwrap();
        let mut set = FeatureImageSet::empty(2, 1);
        set.mask.set(1, 0, true);
        set.inverse_depth.set(1, 0, 5.0);
        set.area.set(1, 0, 3.0);
        let t = m.assemble_input(&[&set], &[]).unwrap();
        assert_eq!(t.shape(), [1, 1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 0.0, 2.0, 3.0]);
        let t = m.assemble_input(&[&set], &[FeatureKind::Area, FeatureKind::Rgb]).unwrap();
        assert_eq!(t.data(), &[0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn norm_fit_matches_direct_statistics() {
        let sel = FeatureSelection::parse("inverse_depth").unwrap();
        let mut set = FeatureImageSet::empty(4, 1);
        for (c, v) in [(0, 1.0), (1, 3.0), (3, 100.0)] {
            set.inverse_depth.set(c, 0, v);
        }
        set.mask.set(0, 0, true);
        set.mask.set(1, 0, true);
        let n = InputNorm::fit(&sel, &[&set]);
        assert_eq!(n.mean, vec![2.0]);
        assert_eq!(n.std, vec![1.0]);
    }
}
