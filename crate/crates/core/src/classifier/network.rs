//! Layer stack, forward pass and backpropagation, all in `f64`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Valid (unpadded) stride-1 convolution with square kernels.
    Conv { filters: usize, kernel: usize },
    Relu,
    /// Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped.
    MaxPool { size: usize },
    /// Fully connected; flattens its input.
    Dense { units: usize },
}

/// conv 8@5×5 → ReLU → pool 2 → conv 16@5×5 → ReLU → pool 2 → dense 64 → ReLU → dense `outputs`.
pub fn default_architecture(outputs: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv { filters: 8, kernel: 5 },
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2 },
        LayerSpec::Conv { filters: 16, kernel: 5 },
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2 },
        LayerSpec::Dense { units: 64 },
        LayerSpec::Relu,
        LayerSpec::Dense { units: outputs },
    ]
}

/// Channels × height × width of an activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Weights `[out, in_features]` and bias `[out]` of one parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Param {
    fn zeros_like(&self) -> Self {
        Self { weights: Array2::zeros(self.weights.raw_dim()), bias: Array1::zeros(self.bias.raw_dim()) }
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Parameters of every layer in order; layers without weights hold `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<LayerSpec>,
    pub params: Vec<Option<Param>>,
    pub input: Shape,
}

/// Per-layer cache kept during the forward pass.
enum Cache {
    Conv { cols: Array2<f64>, input: Shape },
    Relu { positive: Vec<bool> },
    Pool { argmax: Vec<usize>, input: Shape },
    Dense { x: Array1<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<Option<Param>>,
}

impl Gradients {
    pub fn zeros_for(net: &Network) -> Self {
        Self { params: net.params.iter().map(|p| p.as_ref().map(Param::zeros_like)).collect() }
    }

    pub fn scale(&mut self, k: f64) {
        for p in self.params.iter_mut().flatten() {
            p.weights *= k;
            p.bias *= k;
        }
    }
}

pub fn output_shape(layer: &LayerSpec, input: Shape) -> Option<Shape> {
    match *layer {
        LayerSpec::Conv { filters, kernel } => {
            (input.h >= kernel && input.w >= kernel).then(|| Shape { c: filters, h: input.h - kernel + 1, w: input.w - kernel + 1 })
        }
        LayerSpec::Relu => Some(input),
        LayerSpec::MaxPool { size } => (size > 0 && input.h >= size && input.w >= size).then(|| Shape { c: input.c, h: input.h / size, w: input.w / size }),
        LayerSpec::Dense { units } => Some(Shape { c: units, h: 1, w: 1 }),
    }
}

fn im2col(x: ArrayView2<f64>, s: Shape, k: usize) -> Array2<f64> {
    let (ho, wo) = (s.h - k + 1, s.w - k + 1);
    let mut cols = Array2::zeros((s.c * k * k, ho * wo));
    for c in 0..s.c {
        let plane = x.row(c);
        let plane = plane.as_slice().expect("contiguous activation rows");
        for ki in 0..k {
            for kj in 0..k {
                let mut row = cols.row_mut((c * k + ki) * k + kj);
                let row = row.as_slice_mut().expect("contiguous col rows");
                for oy in 0..ho {
                    let src = (oy + ki) * s.w + kj;
                    row[oy * wo..(oy + 1) * wo].copy_from_slice(&plane[src..src + wo]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, s: Shape, k: usize) -> Array2<f64> {
    let (ho, wo) = (s.h - k + 1, s.w - k + 1);
    let mut x = Array2::zeros((s.c, s.h * s.w));
    for c in 0..s.c {
        let mut plane = x.row_mut(c);
        let plane = plane.as_slice_mut().expect("contiguous");
        for ki in 0..k {
            for kj in 0..k {
                let row = cols.row((c * k + ki) * k + kj);
                let row = row.as_slice().expect("contiguous");
                for oy in 0..ho {
                    let dst = (oy + ki) * s.w + kj;
                    for (d, v) in plane[dst..dst + wo].iter_mut().zip(&row[oy * wo..(oy + 1) * wo]) {
                        *d += v;
                    }
                }
            }
        }
    }
    x
}

impl Network {
    /// Xavier-uniform weights, zero biases.
    pub fn init(layers: Vec<LayerSpec>, input: Shape, seed: u64) -> Option<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input;
        let mut params = Vec::with_capacity(layers.len());
        for layer in &layers {
            let next = output_shape(layer, shape)?;
            let param = match *layer {
                LayerSpec::Conv { filters, kernel } => {
                    let fan_in = shape.c * kernel * kernel;
                    let fan_out = filters * kernel * kernel;
                    Some(xavier(&mut rng, filters, fan_in, fan_in, fan_out))
                }
                LayerSpec::Dense { units } => {
                    let fan_in = shape.len();
                    Some(xavier(&mut rng, units, fan_in, fan_in, units))
                }
                _ => None,
            };
            params.push(param);
            shape = next;
        }
        Some(Self { layers, params, input })
    }

    pub fn output_len(&self) -> usize {
        let mut shape = self.input;
        for l in &self.layers {
            shape = output_shape(l, shape).expect("validated at construction");
        }
        shape.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().flatten().map(Param::len).sum()
    }

    fn forward_cached(&self, image: ArrayView2<f64>, keep: bool) -> (Array1<f64>, Vec<Cache>) {
        let mut shape = self.input;
        let mut act: Array2<f64> = image.to_owned().into_shape_with_order((1, shape.h * shape.w)).expect("input shape");
        let mut caches = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        for (layer, param) in self.layers.iter().zip(&self.params) {
            let next = output_shape(layer, shape).expect("validated");
            match *layer {
                LayerSpec::Conv { kernel, .. } => {
                    let p = param.as_ref().expect("conv params");
                    let cols = im2col(act.view(), shape, kernel);
                    let mut out = p.weights.dot(&cols);
                    out += &p.bias.view().insert_axis(Axis(1));
                    if keep {
                        caches.push(Cache::Conv { cols, input: shape });
                    }
                    act = out;
                }
                LayerSpec::Relu => {
                    if keep {
                        caches.push(Cache::Relu { positive: act.iter().map(|&v| v > 0.0).collect() });
                    }
                    act.mapv_inplace(|v| v.max(0.0));
                }
                LayerSpec::MaxPool { size } => {
                    let mut out = Array2::zeros((next.c, next.h * next.w));
                    let mut argmax = Vec::with_capacity(next.len());
                    for c in 0..shape.c {
                        let plane = act.row(c);
                        for oy in 0..next.h {
                            for ox in 0..next.w {
                                let mut best = (oy * size) * shape.w + ox * size;
                                for dy in 0..size {
                                    for dx in 0..size {
                                        let idx = (oy * size + dy) * shape.w + ox * size + dx;
                                        if plane[idx] > plane[best] {
                                            best = idx;
                                        }
                                    }
                                }
                                out[[c, oy * next.w + ox]] = plane[best];
                                argmax.push(c * shape.h * shape.w + best);
                            }
                        }
                    }
                    if keep {
                        caches.push(Cache::Pool { argmax, input: shape });
                    }
                    act = out;
                }
                LayerSpec::Dense { .. } => {
                    let p = param.as_ref().expect("dense params");
                    let x = Array1::from_iter(act.iter().copied());
                    let y = p.weights.dot(&x) + &p.bias;
                    if keep {
                        caches.push(Cache::Dense { x });
                    }
                    act = y.insert_axis(Axis(1));
                }
            }
            shape = next;
        }
        (Array1::from_iter(act.iter().copied()), caches)
    }

    /// Raw output scores for one image `[H, W]`.
    pub fn logits(&self, image: ArrayView2<f64>) -> Array1<f64> {
        self.forward_cached(image, false).0
    }

    /// Cross-entropy loss and its gradient for one labeled image (not averaged).
    pub fn loss_and_gradients(&self, image: ArrayView2<f64>, target: usize) -> (f64, Array1<f64>, Gradients) {
        let mut grads = Gradients::zeros_for(self);
        let (loss, probs) = self.accumulate(image, target, &mut grads);
        (loss, probs, grads)
    }

    /// Adds this image's loss gradient to `grads`; returns loss and probabilities.
    pub fn accumulate(&self, image: ArrayView2<f64>, target: usize, grads: &mut Gradients) -> (f64, Array1<f64>) {
        let (logits, caches) = self.forward_cached(image, true);
        let probs = softmax(&logits);
        let loss = -probs[target].max(f64::MIN_POSITIVE).ln();
        let mut grad = probs.clone();
        grad[target] -= 1.0;
        self.backward(grad, caches, grads);
        (loss, probs)
    }

    fn backward(&self, dlogits: Array1<f64>, caches: Vec<Cache>, grads: &mut Gradients) {
        let mut d: Array2<f64> = dlogits.insert_axis(Axis(1));
        for (i, cache) in caches.into_iter().enumerate().rev() {
            match cache {
                Cache::Dense { x } => {
                    let p = self.params[i].as_ref().expect("dense params");
                    let g = grads.params[i].as_mut().expect("dense grads");
                    general_mat_mul(1.0, &d, &x.view().insert_axis(Axis(0)), 1.0, &mut g.weights);
                    g.bias += &d.column(0);
                    if i > 0 {
                        d = p.weights.t().dot(&d);
                    }
                }
                Cache::Relu { positive } => {
                    for (v, &on) in d.iter_mut().zip(&positive) {
                        if !on {
                            *v = 0.0;
                        }
                    }
                }
                Cache::Pool { argmax, input } => {
                    let mut dx = Array2::zeros((input.c, input.h * input.w));
                    let flat = dx.as_slice_mut().expect("contiguous");
                    for (g, &idx) in d.iter().zip(&argmax) {
                        flat[idx] += g;
                    }
                    d = dx;
                }
                Cache::Conv { cols, input } => {
                    let p = self.params[i].as_ref().expect("conv params");
                    let LayerSpec::Conv { kernel, .. } = self.layers[i] else { unreachable!() };
                    // d arrives flattened as [c*h*w, 1] from a dense layer or as [c, h*w]
                    let out_c = p.weights.nrows();
                    let dout = d.into_shape_with_order((out_c, cols.ncols())).expect("conv grad shape");
                    let g = grads.params[i].as_mut().expect("conv grads");
                    general_mat_mul(1.0, &dout, &cols.t(), 1.0, &mut g.weights);
                    g.bias += &dout.sum_axis(Axis(1));
                    if i == 0 {
                        return;
                    }
                    let dcols = p.weights.t().dot(&dout);
                    d = col2im(&dcols, input, kernel);
                }
            }
        }
    }

    /// Summed loss, correct-prediction count and summed gradients over a batch,
    /// accumulated in index order.
    pub fn batch_gradients(&self, batch: &[(ArrayView2<f64>, usize)]) -> (f64, usize, Gradients) {
        let mut total = Gradients::zeros_for(self);
        let mut loss = 0.0;
        let mut correct = 0;
        for (img, target) in batch {
            let (l, probs) = self.accumulate(*img, *target, &mut total);
            loss += l;
            if argmax(&probs) == *target {
                correct += 1;
            }
        }
        (loss, correct, total)
    }

    /// Mean cross-entropy over a batch.
    pub fn batch_loss(&self, batch: &[(ArrayView2<f64>, usize)]) -> f64 {
        let sum: f64 = batch
            .iter()
            .map(|(img, t)| {
                let p = softmax(&self.logits(*img));
                -p[*t].max(f64::MIN_POSITIVE).ln()
            })
            .sum();
        sum / batch.len() as f64
    }

    /// Mutable access to a scalar parameter by (layer index, flat index, bias?).
    pub fn param_mut(&mut self, layer: usize, bias: bool, idx: usize) -> &mut f64 {
        let p = self.params[layer].as_mut().expect("parametric layer");
        if bias {
            &mut p.bias[idx]
        } else {
            let cols = p.weights.ncols();
            &mut p.weights[[idx / cols, idx % cols]]
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().flatten().all(|p| p.weights.iter().chain(p.bias.iter()).all(|v| v.is_finite()))
    }

    /// View of a layer's dense weights restricted to rows, used in tests.
    pub fn weight_rows(&self, layer: usize, rows: std::ops::Range<usize>) -> Array2<f64> {
        self.params[layer].as_ref().expect("parametric").weights.slice(s![rows, ..]).to_owned()
    }
}

fn xavier(rng: &mut ChaCha8Rng, out: usize, inp: usize, fan_in: usize, fan_out: usize) -> Param {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let weights = Array2::from_shape_simple_fn((out, inp), || rng.random_range(-limit..=limit));
    Param { weights, bias: Array1::zeros(out) }
}

pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
