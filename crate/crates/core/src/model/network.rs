//! Feed-forward layers over a flat parameter vector with hand-written
//! reverse-mode gradients.
//!
//! Dense weights are stored input-major (`w[i * outputs + o]`) so that a zero
//! input contributes nothing and can be skipped in both passes; fingerprints
//! are mostly "not detected" and the first layer dominates the cost otherwise.

use rand::Rng;

use super::{ModelKind, ModelSpec};

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Layer {
    Dense {
        w: usize,
        b: usize,
        inputs: usize,
        outputs: usize,
    },
    Relu,
    /// Single input channel, `channels` output channels, stride 1, no padding.
    Conv1d {
        w: usize,
        b: usize,
        channels: usize,
        kernel: usize,
        len: usize,
    },
    Sigmoid,
}

impl Layer {
    fn output_len(&self, input_len: usize) -> usize {
        match *self {
            Layer::Dense { outputs, .. } => outputs,
            Layer::Relu | Layer::Sigmoid => input_len,
            Layer::Conv1d {
                channels, kernel, len, ..
            } => channels * (len - kernel + 1),
        }
    }

    fn forward(&self, p: &[f64], input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        match *self {
            Layer::Dense {
                w, b, inputs, outputs,
            } => {
                out.extend_from_slice(&p[b..b + outputs]);
                for (i, &x) in input.iter().enumerate().take(inputs) {
                    if x == 0.0 {
                        continue;
                    }
                    let row = &p[w + i * outputs..w + (i + 1) * outputs];
                    for (o, &wv) in out.iter_mut().zip(row) {
                        *o += x * wv;
                    }
                }
            }
            Layer::Relu => out.extend(input.iter().map(|&x| x.max(0.0))),
            Layer::Sigmoid => out.extend(input.iter().map(|&x| sigmoid(x))),
            Layer::Conv1d {
                w,
                b,
                channels,
                kernel,
                len,
            } => {
                let steps = len - kernel + 1;
                for c in 0..channels {
                    let kw = &p[w + c * kernel..w + (c + 1) * kernel];
                    let bias = p[b + c];
                    for t in 0..steps {
                        let window = &input[t..t + kernel];
                        out.push(bias + window.iter().zip(kw).map(|(x, k)| x * k).sum::<f64>());
                    }
                }
            }
        }
    }

    /// Accumulate parameter gradients into `grad` and, when `dinput` is given,
    /// write the gradient with respect to the layer input.
    fn backward(
        &self,
        p: &[f64],
        input: &[f64],
        output: &[f64],
        dout: &[f64],
        grad: &mut [f64],
        dinput: Option<&mut Vec<f64>>,
    ) {
        match *self {
            Layer::Dense {
                w, b, inputs, outputs,
            } => {
                for (g, d) in grad[b..b + outputs].iter_mut().zip(dout) {
                    *g += d;
                }
                for (i, &x) in input.iter().enumerate().take(inputs) {
                    if x == 0.0 {
                        continue;
                    }
                    let gw = &mut grad[w + i * outputs..w + (i + 1) * outputs];
                    for (g, &d) in gw.iter_mut().zip(dout) {
                        *g += x * d;
                    }
                }
                if let Some(dx) = dinput {
                    dx.clear();
                    dx.extend((0..inputs).map(|i| {
                        p[w + i * outputs..w + (i + 1) * outputs]
                            .iter()
                            .zip(dout)
                            .map(|(wv, d)| wv * d)
                            .sum::<f64>()
                    }));
                }
            }
            Layer::Relu => {
                if let Some(dx) = dinput {
                    dx.clear();
                    dx.extend(
                        input
                            .iter()
                            .zip(dout)
                            .map(|(&x, &d)| if x > 0.0 { d } else { 0.0 }),
                    );
                }
            }
            Layer::Sigmoid => {
                if let Some(dx) = dinput {
                    dx.clear();
                    dx.extend(output.iter().zip(dout).map(|(&y, &d)| d * y * (1.0 - y)));
                }
            }
            Layer::Conv1d {
                w,
                b,
                channels,
                kernel,
                len,
            } => {
                let steps = len - kernel + 1;
                let mut dx_buf = dinput;
                if let Some(dx) = dx_buf.as_deref_mut() {
                    dx.clear();
                    dx.resize(len, 0.0);
                }
                for c in 0..channels {
                    let d = &dout[c * steps..(c + 1) * steps];
                    grad[b + c] += d.iter().sum::<f64>();
                    for k in 0..kernel {
                        grad[w + c * kernel + k] +=
                            d.iter().zip(&input[k..k + steps]).map(|(a, x)| a * x).sum::<f64>();
                    }
                    if let Some(dx) = dx_buf.as_deref_mut() {
                        for k in 0..kernel {
                            let kv = p[w + c * kernel + k];
                            for (t, &dv) in d.iter().enumerate() {
                                dx[t + k] += kv * dv;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A compiled architecture: layer sequence plus parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: ModelSpec,
    layers: Vec<Layer>,
    param_count: usize,
}

impl Network {
    pub(crate) fn build(spec: &ModelSpec) -> Self {
        fn dense(layers: &mut Vec<Layer>, offset: &mut usize, inputs: usize, outputs: usize) {
            layers.push(Layer::Dense {
                w: *offset,
                b: *offset + inputs * outputs,
                inputs,
                outputs,
            });
            *offset += inputs * outputs + outputs;
        }

        let mut layers = Vec::new();
        let mut offset = 0;
        dense(&mut layers, &mut offset, spec.input_dim, spec.extractor_width);
        layers.push(Layer::Relu);
        match spec.kind {
            ModelKind::Bfc => {
                let mut width = spec.extractor_width;
                if spec.use_conv {
                    let (channels, kernel) = (spec.conv_channels, spec.conv_kernel);
                    let conv = Layer::Conv1d {
                        w: offset,
                        b: offset + channels * kernel,
                        channels,
                        kernel,
                        len: width,
                    };
                    width = conv.output_len(width);
                    offset += channels * kernel + channels;
                    layers.push(conv);
                    layers.push(Layer::Relu);
                }
                dense(&mut layers, &mut offset, width, spec.output_dim);
                layers.push(Layer::Sigmoid);
            }
            ModelKind::Llr => {
                dense(&mut layers, &mut offset, spec.extractor_width, spec.hidden_width);
                layers.push(Layer::Relu);
                dense(&mut layers, &mut offset, spec.hidden_width, spec.output_dim);
            }
        }
        Network {
            spec: spec.clone(),
            layers,
            param_count: offset,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// Parameter ranges with the half-width of their initialization
    /// distribution. Bias ranges report the bound of their layer's weights.
    pub fn init_ranges(&self) -> Vec<(std::ops::Range<usize>, f64, bool)> {
        let mut out = Vec::new();
        for l in &self.layers {
            match *l {
                Layer::Dense {
                    w, b, inputs, outputs,
                } => {
                    let bound = (6.0 / inputs as f64).sqrt();
                    out.push((w..b, bound, false));
                    out.push((b..b + outputs, bound, true));
                }
                Layer::Conv1d {
                    w, b, channels, kernel, ..
                } => {
                    let bound = (6.0 / kernel as f64).sqrt();
                    out.push((w..b, bound, false));
                    out.push((b..b + channels, bound, true));
                }
                Layer::Relu | Layer::Sigmoid => {}
            }
        }
        out
    }

    /// Kaiming-uniform weights, zero biases.
    pub(crate) fn init_values<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut v = vec![0.0; self.param_count];
        for (range, bound, is_bias) in self.init_ranges() {
            if !is_bias {
                for x in &mut v[range] {
                    *x = rng.gen_range(-bound..=bound);
                }
            }
        }
        v
    }

    /// Run the network, keeping every layer output for a later backward pass.
    pub(crate) fn forward_trace(&self, p: &[f64], x: &[f64], acts: &mut Vec<Vec<f64>>) {
        acts.resize_with(self.layers.len(), Vec::new);
        for i in 0..self.layers.len() {
            let (done, rest) = acts.split_at_mut(i);
            let input: &[f64] = if i == 0 { x } else { &done[i - 1] };
            self.layers[i].forward(p, input, &mut rest[0]);
        }
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        let mut acts = Vec::new();
        self.forward_trace(p, x, &mut acts);
        acts.pop().unwrap_or_default()
    }

    /// Backpropagate `dout` (gradient of the loss at the network output),
    /// accumulating into `grad`.
    pub(crate) fn backward_trace(
        &self,
        p: &[f64],
        x: &[f64],
        acts: &[Vec<f64>],
        dout: Vec<f64>,
        grad: &mut [f64],
        scratch: &mut Vec<f64>,
    ) {
        let mut d = dout;
        for i in (0..self.layers.len()).rev() {
            let input: &[f64] = if i == 0 { x } else { &acts[i - 1] };
            let want_dx = i > 0;
            self.layers[i].backward(
                p,
                input,
                &acts[i],
                &d,
                grad,
                if want_dx { Some(&mut *scratch) } else { None },
            );
            if want_dx {
                std::mem::swap(&mut d, scratch);
            }
        }
    }

    #[cfg(test)]
    pub(crate) fn layers(&self) -> &[Layer] {
        &self.layers
    }
}
