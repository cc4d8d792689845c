//! Minimal sequential networks with hand-written backpropagation.
//!
//! Layers operate on flat `f64` buffers. Convolution and pooling outputs are
//! laid out channel-major (`[channel][position]`), which also serves as the
//! flattened input of a following dense layer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Param {
    fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param {
            shape,
            values: vec![0.0; n],
        }
    }

    fn uniform<R: Rng + ?Sized>(shape: Vec<usize>, limit: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
        Param { shape, values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
        weight: usize,
        bias: usize,
    },
    /// Single input channel, valid padding, stride 1.
    Conv1d {
        in_len: usize,
        filters: usize,
        width: usize,
        weight: usize,
        bias: usize,
    },
    MaxPool1d {
        channels: usize,
        in_len: usize,
        width: usize,
    },
    Relu,
    /// Inverted dropout: kept units are scaled by `1/(1-rate)` in training.
    Dropout {
        rate: f64,
    },
    /// LSTM over a scalar sequence; emits the final hidden state.
    /// Gate order in the stacked weights is input, forget, cell, output.
    Lstm {
        steps: usize,
        hidden: usize,
        w_input: usize,
        w_hidden: usize,
        bias: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub input_len: usize,
    pub output_len: usize,
    pub layers: Vec<Layer>,
    pub params: Vec<Param>,
}

/// Incrementally assembles a [`Network`], tracking the running shape.
pub struct NetworkBuilder<'r> {
    input_len: usize,
    len: usize,
    channels: usize,
    layers: Vec<Layer>,
    params: Vec<Param>,
    rng: &'r mut ChaCha8Rng,
}

impl<'r> NetworkBuilder<'r> {
    pub fn new(input_len: usize, rng: &'r mut ChaCha8Rng) -> Self {
        NetworkBuilder {
            input_len,
            len: input_len,
            channels: 1,
            layers: Vec::new(),
            params: Vec::new(),
            rng,
        }
    }

    fn push_param(&mut self, p: Param) -> usize {
        self.params.push(p);
        self.params.len() - 1
    }

    /// Fully connected layer with fan-in scaled uniform initialization.
    pub fn dense(mut self, outputs: usize) -> Self {
        let inputs = self.len * self.channels;
        let limit = (6.0 / inputs as f64).sqrt();
        let weight = Param::uniform(vec![outputs, inputs], limit, self.rng);
        let weight = self.push_param(weight);
        let bias = self.push_param(Param::zeros(vec![outputs]));
        self.layers.push(Layer::Dense {
            inputs,
            outputs,
            weight,
            bias,
        });
        self.len = outputs;
        self.channels = 1;
        self
    }

    pub fn conv1d(mut self, filters: usize, width: usize) -> Result<Self> {
        if self.channels != 1 || self.len < width {
            return Err(Error::argument(format!(
                "conv1d of width {width} needs a single-channel input of at least that length, got {}x{}",
                self.channels, self.len
            )));
        }
        let limit = (6.0 / width as f64).sqrt();
        let weight = Param::uniform(vec![filters, width], limit, self.rng);
        let weight = self.push_param(weight);
        let bias = self.push_param(Param::zeros(vec![filters]));
        self.layers.push(Layer::Conv1d {
            in_len: self.len,
            filters,
            width,
            weight,
            bias,
        });
        self.len = self.len - width + 1;
        self.channels = filters;
        Ok(self)
    }

    pub fn max_pool(mut self, width: usize) -> Result<Self> {
        if width == 0 || self.len < width {
            return Err(Error::argument(format!(
                "max pool of width {width} over length {}",
                self.len
            )));
        }
        self.layers.push(Layer::MaxPool1d {
            channels: self.channels,
            in_len: self.len,
            width,
        });
        self.len /= width;
        Ok(self)
    }

    pub fn relu(mut self) -> Self {
        self.layers.push(Layer::Relu);
        self
    }

    pub fn dropout(mut self, rate: f64) -> Self {
        self.layers.push(Layer::Dropout { rate });
        self
    }

    pub fn lstm(mut self, hidden: usize) -> Result<Self> {
        if self.channels != 1 {
            return Err(Error::argument("lstm expects a flat scalar sequence"));
        }
        let limit = 1.0 / (hidden as f64).sqrt();
        let w_input = Param::uniform(vec![4 * hidden], limit, self.rng);
        let w_input = self.push_param(w_input);
        let w_hidden = Param::uniform(vec![4 * hidden, hidden], limit, self.rng);
        let w_hidden = self.push_param(w_hidden);
        let mut bias = Param::zeros(vec![4 * hidden]);
        // Forget gate starts open.
        bias.values[hidden..2 * hidden].fill(1.0);
        let bias = self.push_param(bias);
        self.layers.push(Layer::Lstm {
            steps: self.len,
            hidden,
            w_input,
            w_hidden,
            bias,
        });
        self.len = hidden;
        Ok(self)
    }

    pub fn build(self) -> Network {
        Network {
            input_len: self.input_len,
            output_len: self.len * self.channels,
            layers: self.layers,
            params: self.params,
        }
    }
}

#[derive(Debug, Clone)]
struct LstmStep {
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
    h_prev: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Cache {
    Input(Vec<f64>),
    Pool {
        argmax: Vec<usize>,
        in_total: usize,
    },
    Relu(Vec<f64>),
    Dropout(Option<Vec<f64>>),
    Lstm {
        input: Vec<f64>,
        steps: Vec<LstmStep>,
    },
}

/// Activations retained by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    caches: Vec<Cache>,
    pub output: Vec<f64>,
}

/// Parameter gradients, shaped like [`Network::params`].
pub type Grads = Vec<Vec<f64>>;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Network {
    pub fn zero_grads(&self) -> Grads {
        self.params
            .iter()
            .map(|p| vec![0.0; p.values.len()])
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Inference pass: dropout disabled, deterministic.
    pub fn infer(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x, None::<&mut ChaCha8Rng>)?.output)
    }

    /// Forward pass. Passing an rng enables training mode (dropout masks are
    /// drawn from it); `None` is inference mode.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        mut rng: Option<&mut R>,
    ) -> Result<ForwardPass> {
        ensure_dims(self.input_len, x.len())?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let (next, cache) = match *layer {
                Layer::Dense {
                    inputs,
                    outputs,
                    weight,
                    bias,
                } => {
                    let w = &self.params[weight].values;
                    let b = &self.params[bias].values;
                    let out = (0..outputs)
                        .map(|o| {
                            let row = &w[o * inputs..(o + 1) * inputs];
                            b[o] + row.iter().zip(&cur).map(|(a, c)| a * c).sum::<f64>()
                        })
                        .collect();
                    (out, Cache::Input(cur))
                }
                Layer::Conv1d {
                    in_len,
                    filters,
                    width,
                    weight,
                    bias,
                } => {
                    let w = &self.params[weight].values;
                    let b = &self.params[bias].values;
                    let out_len = in_len - width + 1;
                    let mut out = Vec::with_capacity(filters * out_len);
                    for f in 0..filters {
                        let k = &w[f * width..(f + 1) * width];
                        for t in 0..out_len {
                            let win = &cur[t..t + width];
                            out.push(b[f] + k.iter().zip(win).map(|(a, c)| a * c).sum::<f64>());
                        }
                    }
                    (out, Cache::Input(cur))
                }
                Layer::MaxPool1d {
                    channels,
                    in_len,
                    width,
                } => {
                    let out_len = in_len / width;
                    let mut out = Vec::with_capacity(channels * out_len);
                    let mut argmax = Vec::with_capacity(channels * out_len);
                    for c in 0..channels {
                        for j in 0..out_len {
                            let start = c * in_len + j * width;
                            let mut best = start;
                            for idx in start + 1..start + width {
                                if cur[idx] > cur[best] {
                                    best = idx;
                                }
                            }
                            out.push(cur[best]);
                            argmax.push(best);
                        }
                    }
                    let in_total = cur.len();
                    (out, Cache::Pool { argmax, in_total })
                }
                Layer::Relu => {
                    let out: Vec<f64> = cur.iter().map(|v| v.max(0.0)).collect();
                    (out.clone(), Cache::Relu(out))
                }
                Layer::Dropout { rate } => match rng.as_deref_mut() {
                    Some(r) if rate > 0.0 => {
                        let scale = 1.0 / (1.0 - rate);
                        let mask: Vec<f64> = (0..cur.len())
                            .map(|_| if r.random::<f64>() < rate { 0.0 } else { scale })
                            .collect();
                        let out = cur.iter().zip(&mask).map(|(v, m)| v * m).collect();
                        (out, Cache::Dropout(Some(mask)))
                    }
                    _ => (cur, Cache::Dropout(None)),
                },
                Layer::Lstm {
                    steps,
                    hidden,
                    w_input,
                    w_hidden,
                    bias,
                } => {
                    let wx = &self.params[w_input].values;
                    let wh = &self.params[w_hidden].values;
                    let b = &self.params[bias].values;
                    let mut h = vec![0.0; hidden];
                    let mut c = vec![0.0; hidden];
                    let mut trace = Vec::with_capacity(steps);
                    let mut z = vec![0.0; 4 * hidden];
                    for &xt in cur.iter().take(steps) {
                        for (r, zr) in z.iter_mut().enumerate() {
                            let row = &wh[r * hidden..(r + 1) * hidden];
                            *zr = b[r]
                                + wx[r] * xt
                                + row.iter().zip(&h).map(|(a, v)| a * v).sum::<f64>();
                        }
                        let i: Vec<f64> = z[..hidden].iter().map(|v| sigmoid(*v)).collect();
                        let f: Vec<f64> =
                            z[hidden..2 * hidden].iter().map(|v| sigmoid(*v)).collect();
                        let g: Vec<f64> =
                            z[2 * hidden..3 * hidden].iter().map(|v| v.tanh()).collect();
                        let o: Vec<f64> = z[3 * hidden..].iter().map(|v| sigmoid(*v)).collect();
                        let c_prev = c.clone();
                        for u in 0..hidden {
                            c[u] = f[u] * c_prev[u] + i[u] * g[u];
                        }
                        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
                        let h_prev = std::mem::replace(
                            &mut h,
                            o.iter().zip(&tanh_c).map(|(a, t)| a * t).collect(),
                        );
                        trace.push(LstmStep {
                            i,
                            f,
                            g,
                            o,
                            c_prev,
                            tanh_c,
                            h_prev,
                        });
                    }
                    (
                        h,
                        Cache::Lstm {
                            input: cur,
                            steps: trace,
                        },
                    )
                }
            };
            caches.push(cache);
            cur = next;
        }
        Ok(ForwardPass {
            caches,
            output: cur,
        })
    }

    /// Accumulates parameter gradients for `d_output` into `grads` and
    /// returns the gradient with respect to the network input.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        d_output: &[f64],
        grads: &mut Grads,
    ) -> Result<Vec<f64>> {
        ensure_dims(self.output_len, d_output.len())?;
        let mut dy = d_output.to_vec();
        for (layer, cache) in self.layers.iter().zip(&pass.caches).rev() {
            dy = match (layer, cache) {
                (
                    &Layer::Dense {
                        inputs,
                        outputs,
                        weight,
                        bias,
                    },
                    Cache::Input(x),
                ) => {
                    let w = &self.params[weight].values;
                    let mut dx = vec![0.0; inputs];
                    {
                        let gw = &mut grads[weight];
                        for o in 0..outputs {
                            let d = dy[o];
                            if d == 0.0 {
                                continue;
                            }
                            let grow = &mut gw[o * inputs..(o + 1) * inputs];
                            for (g, xi) in grow.iter_mut().zip(x) {
                                *g += d * xi;
                            }
                            let row = &w[o * inputs..(o + 1) * inputs];
                            for (dxi, wi) in dx.iter_mut().zip(row) {
                                *dxi += d * wi;
                            }
                        }
                    }
                    for (g, d) in grads[bias].iter_mut().zip(&dy) {
                        *g += d;
                    }
                    dx
                }
                (
                    &Layer::Conv1d {
                        in_len,
                        filters,
                        width,
                        weight,
                        bias,
                    },
                    Cache::Input(x),
                ) => {
                    let w = &self.params[weight].values;
                    let out_len = in_len - width + 1;
                    let mut dx = vec![0.0; in_len];
                    for f in 0..filters {
                        let dyf = &dy[f * out_len..(f + 1) * out_len];
                        grads[bias][f] += dyf.iter().sum::<f64>();
                        for k in 0..width {
                            let mut acc = 0.0;
                            for t in 0..out_len {
                                acc += dyf[t] * x[t + k];
                                dx[t + k] += dyf[t] * w[f * width + k];
                            }
                            grads[weight][f * width + k] += acc;
                        }
                    }
                    dx
                }
                (Layer::MaxPool1d { .. }, Cache::Pool { argmax, in_total }) => {
                    let mut dx = vec![0.0; *in_total];
                    for (d, &idx) in dy.iter().zip(argmax) {
                        dx[idx] += d;
                    }
                    dx
                }
                (Layer::Relu, Cache::Relu(out)) => dy
                    .iter()
                    .zip(out)
                    .map(|(d, o)| if *o > 0.0 { *d } else { 0.0 })
                    .collect(),
                (Layer::Dropout { .. }, Cache::Dropout(mask)) => match mask {
                    Some(m) => dy.iter().zip(m).map(|(d, s)| d * s).collect(),
                    None => dy,
                },
                (
                    &Layer::Lstm {
                        hidden,
                        w_input,
                        w_hidden,
                        bias,
                        ..
                    },
                    Cache::Lstm { input, steps },
                ) => self.lstm_backward(hidden, w_input, w_hidden, bias, input, steps, dy, grads),
                _ => unreachable!("cache does not match layer"),
            };
        }
        Ok(dy)
    }

    #[allow(clippy::too_many_arguments)]
    fn lstm_backward(
        &self,
        hidden: usize,
        w_input: usize,
        w_hidden: usize,
        bias: usize,
        input: &[f64],
        steps: &[LstmStep],
        dy: Vec<f64>,
        grads: &mut Grads,
    ) -> Vec<f64> {
        let wx = &self.params[w_input].values;
        let wh = &self.params[w_hidden].values;
        let mut dx = vec![0.0; input.len()];
        let mut dh = dy;
        let mut dc = vec![0.0; hidden];
        let mut dz = vec![0.0; 4 * hidden];
        for (t, s) in steps.iter().enumerate().rev() {
            for u in 0..hidden {
                let d_o = dh[u] * s.tanh_c[u];
                dc[u] += dh[u] * s.o[u] * (1.0 - s.tanh_c[u] * s.tanh_c[u]);
                let d_i = dc[u] * s.g[u];
                let d_g = dc[u] * s.i[u];
                let d_f = dc[u] * s.c_prev[u];
                dz[u] = d_i * s.i[u] * (1.0 - s.i[u]);
                dz[hidden + u] = d_f * s.f[u] * (1.0 - s.f[u]);
                dz[2 * hidden + u] = d_g * (1.0 - s.g[u] * s.g[u]);
                dz[3 * hidden + u] = d_o * s.o[u] * (1.0 - s.o[u]);
                dc[u] *= s.f[u];
            }
            let xt = input[t];
            let mut dh_prev = vec![0.0; hidden];
            for (r, &d) in dz.iter().enumerate() {
                grads[w_input][r] += d * xt;
                grads[bias][r] += d;
                dx[t] += d * wx[r];
                if d == 0.0 {
                    continue;
                }
                let row = &wh[r * hidden..(r + 1) * hidden];
                let grow = &mut grads[w_hidden][r * hidden..(r + 1) * hidden];
                for j in 0..hidden {
                    grow[j] += d * s.h_prev[j];
                    dh_prev[j] += d * row[j];
                }
            }
            dh = dh_prev;
        }
        dx
    }
}

/// Accumulates `src` into `dst` elementwise.
pub fn add_grads(dst: &mut Grads, src: &Grads) {
    for (d, s) in dst.iter_mut().zip(src) {
        for (a, b) in d.iter_mut().zip(s) {
            *a += b;
        }
    }
}

pub fn scale_grads(grads: &mut Grads, factor: f64) {
    for g in grads.iter_mut().flat_map(|g| g.iter_mut()) {
        *g *= factor;
    }
}
