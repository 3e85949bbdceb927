use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{
    infer_shape, init_layers, run_layers, ClassifierSpec, InternalRepresentation, Layer, Mode, NetError,
    ParamStore, Session, LOGVAR_RANGE,
};
use crate::autodiff::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Per-channel statistics of a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DatasetStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self, NetError> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(NetError::Spec(format!(
                "dataset stats need one mean and std per channel, got {} and {}",
                mean.len(),
                std.len()
            )));
        }
        if let Some(s) = std.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(NetError::Spec(format!("dataset std must be strictly positive, got {s}")));
        }
        Ok(DatasetStats { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        DatasetStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Statistics of an (N, C, H, W) batch. A constant channel gets std 1.
    pub fn from_images<T: Scalar>(images: &Tensor<T>) -> Result<Self, NetError> {
        let s = images.shape();
        if s.len() != 4 || s[0] == 0 {
            return Err(NetError::Spec(format!("dataset stats need (N, C, H, W) images, got {s:?}")));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                for &v in &images.data()[base..base + plane] {
                    let v = v.as_f64();
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (n * plane) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, &q)| {
                *m /= count;
                let var = (q / count - *m * *m).max(0.0);
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        DatasetStats::new(mean, std)
    }

    pub fn standardize<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.mean.len() {
            return Err(NetError::Mismatch {
                layer: "standardize".into(),
                detail: format!("stats for {} channels, input {s:?}", self.mean.len()),
            });
        }
        let (c, plane) = (s[1], s[2] * s[3]);
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = T::of((v.as_f64() - self.mean[ch]) / self.std[ch]);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurifierWidths {
    pub fcrepr: usize,
    pub fjoint: usize,
    pub input_channels: [usize; 2],
    pub decoder_channels: [usize; 3],
}

impl Default for PurifierWidths {
    fn default() -> Self {
        PurifierWidths {
            fcrepr: 128,
            fjoint: 32,
            input_channels: [6, 12],
            decoder_channels: [16, 8, 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReprEncoderSpec {
    pub capture: String,
    pub input_shape: [usize; 3],
    pub layers: Vec<Layer>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurifierSpec {
    pub image_shape: [usize; 3],
    pub fcrepr: usize,
    pub fjoint: usize,
    pub input_encoder: Vec<Layer>,
    pub repr_encoders: Vec<ReprEncoderSpec>,
    pub fc_repr: Vec<Layer>,
    pub joint: Vec<Layer>,
    pub joint_mu: Layer,
    pub joint_logvar: Layer,
    /// Ends with a sigmoid; training uses the logits before it.
    pub decoder: Vec<Layer>,
}

fn conv_bn_act(layers: &mut Vec<Layer>, name: &str, cin: usize, cout: usize, stride: usize, padding: usize) {
    layers.push(Layer::conv(&format!("{name}.conv"), cin, cout, 3, stride, padding, false));
    layers.push(Layer::batch_norm(&format!("{name}.bn"), cout));
    layers.push(Layer::leaky());
}

impl PurifierSpec {
    /// Purifier matching the capture layers of `classifier`.
    pub fn for_classifier(classifier: &ClassifierSpec, w: PurifierWidths) -> Result<Self, NetError> {
        let [c, h, wd] = classifier.input_shape;
        if h % 4 != 0 || wd % 4 != 0 {
            return Err(NetError::Spec(format!("image extent {h}x{wd} must be a multiple of 4")));
        }

        let mut input_encoder = Vec::new();
        conv_bn_act(&mut input_encoder, "in0", c, w.input_channels[0], 2, 1);
        conv_bn_act(&mut input_encoder, "in1", w.input_channels[0], w.input_channels[1], 2, 1);
        input_encoder.push(Layer::Flatten);

        let mut repr_encoders = Vec::new();
        let mut repr_width = 0;
        for (name, shape) in classifier.capture_shapes()? {
            let mut layers = Vec::new();
            let mut cin = shape[0];
            for (i, div) in [2, 4, 8].into_iter().enumerate() {
                let cout = shape[0].div_ceil(div);
                conv_bn_act(&mut layers, &format!("l{i}"), cin, cout, 1, 0);
                cin = cout;
            }
            layers.push(Layer::Flatten);
            let out = infer_shape(&layers, &shape).map_err(|e| {
                NetError::Spec(format!("representation encoder for `{name}` does not fit {shape:?}: {e}"))
            })?;
            repr_width += out[0];
            repr_encoders.push(ReprEncoderSpec {
                capture: name,
                input_shape: shape,
                layers,
            });
        }

        let fc_repr = vec![
            Layer::linear("fc", repr_width, w.fcrepr, false),
            Layer::batch_norm("bn", w.fcrepr),
            Layer::leaky(),
        ];

        let input_width = infer_shape(&input_encoder, &classifier.input_shape)?[0];
        let joint = vec![
            Layer::linear("fc", input_width + w.fcrepr, w.fjoint, false),
            Layer::batch_norm("bn", w.fjoint),
            Layer::leaky(),
        ];

        let [d0, d1, d2] = w.decoder_channels;
        let (h4, w4) = (h / 4, wd / 4);
        let up = |name: &str, cin, cout, stride, output_padding, bias| Layer::ConvTranspose2d {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            kernel: 3,
            stride,
            padding: 1,
            output_padding,
            bias,
        };
        let decoder = vec![
            Layer::linear("fc", w.fjoint + w.fcrepr, d0 * h4 * w4, true),
            Layer::leaky(),
            Layer::Unflatten { shape: vec![d0, h4, w4] },
            up("up0", d0, d1, 2, 1, false),
            Layer::batch_norm("bn0", d1),
            Layer::leaky(),
            up("up1", d1, d2, 2, 1, false),
            Layer::batch_norm("bn1", d2),
            Layer::leaky(),
            up("out", d2, c, 1, 0, true),
            Layer::Sigmoid,
        ];

        let spec = PurifierSpec {
            image_shape: classifier.input_shape,
            fcrepr: w.fcrepr,
            fjoint: w.fjoint,
            input_encoder,
            repr_encoders,
            fc_repr,
            joint,
            joint_mu: Layer::linear("mu", w.fjoint, w.fjoint, true),
            joint_logvar: Layer::linear("logvar", w.fjoint, w.fjoint, true),
            decoder,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let input_width = infer_shape(&self.input_encoder, &self.image_shape)?;
        if input_width.len() != 1 {
            return Err(NetError::Spec("input encoder must end flat".into()));
        }
        let mut repr_width = 0;
        for enc in &self.repr_encoders {
            let out = infer_shape(&enc.layers, &enc.input_shape)?;
            if out.len() != 1 {
                return Err(NetError::Spec(format!("encoder for `{}` must end flat", enc.capture)));
            }
            repr_width += out[0];
        }
        if infer_shape(&self.fc_repr, &[repr_width])? != [self.fcrepr] {
            return Err(NetError::Spec(format!("conditioning encoder must emit width {}", self.fcrepr)));
        }
        let hidden = infer_shape(&self.joint, &[input_width[0] + self.fcrepr])?;
        for head in [&self.joint_mu, &self.joint_logvar] {
            if head.output_shape(&hidden)? != [self.fjoint] {
                return Err(NetError::Spec(format!("joint heads must emit width {}", self.fjoint)));
            }
        }
        if !matches!(self.decoder.last(), Some(Layer::Sigmoid)) {
            return Err(NetError::Spec("decoder must end with a sigmoid".into()));
        }
        let out = infer_shape(&self.decoder, &[self.fjoint + self.fcrepr])?;
        if out != self.image_shape {
            return Err(NetError::Spec(format!(
                "decoder emits {out:?}, images are {:?}",
                self.image_shape
            )));
        }
        Ok(())
    }

    /// Checks that the representation encoders match a classifier's captures.
    pub fn check_compatible(&self, classifier: &ClassifierSpec) -> Result<(), NetError> {
        let shapes = classifier.capture_shapes()?;
        if shapes.len() != self.repr_encoders.len() {
            return Err(NetError::Spec(format!(
                "classifier captures {} layers, purifier expects {}",
                shapes.len(),
                self.repr_encoders.len()
            )));
        }
        for ((name, shape), enc) in shapes.iter().zip(&self.repr_encoders) {
            if *name != enc.capture || *shape != enc.input_shape {
                return Err(NetError::Mismatch {
                    layer: enc.capture.clone(),
                    detail: format!("purifier expects {:?}, classifier `{name}` gives {shape:?}", enc.input_shape),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Purifier<T: Scalar = f32> {
    pub spec: PurifierSpec,
    pub params: ParamStore<T>,
    pub stats: DatasetStats,
    input_encoder_calls: AtomicUsize,
}

impl<T: Scalar> Clone for Purifier<T> {
    fn clone(&self) -> Self {
        Purifier {
            spec: self.spec.clone(),
            params: self.params.clone(),
            stats: self.stats.clone(),
            input_encoder_calls: AtomicUsize::new(self.input_encoder_calls()),
        }
    }
}

fn repr_prefix(capture: &str) -> String {
    format!("repr.{capture}.")
}

impl<T: Scalar> Purifier<T> {
    pub fn init(spec: PurifierSpec, stats: DatasetStats, seed: u64) -> Result<Self, NetError> {
        spec.validate()?;
        let mut rng = Rng::stream(seed, &[0x9E21]);
        let params = Self::fresh_params(&spec, &mut rng);
        Ok(Purifier {
            spec,
            params,
            stats,
            input_encoder_calls: AtomicUsize::new(0),
        })
    }

    fn fresh_params(spec: &PurifierSpec, rng: &mut Rng) -> ParamStore<T> {
        let mut p = ParamStore::new();
        init_layers(&spec.input_encoder, "input.", rng, &mut p);
        for enc in &spec.repr_encoders {
            init_layers(&enc.layers, &repr_prefix(&enc.capture), rng, &mut p);
        }
        init_layers(&spec.fc_repr, "cond.", rng, &mut p);
        init_layers(&spec.joint, "joint.", rng, &mut p);
        init_layers(std::slice::from_ref(&spec.joint_mu), "joint.", rng, &mut p);
        init_layers(std::slice::from_ref(&spec.joint_logvar), "joint.", rng, &mut p);
        init_layers(&spec.decoder, "decoder.", rng, &mut p);
        p
    }

    pub fn from_parts(spec: PurifierSpec, params: ParamStore<T>, stats: DatasetStats) -> Result<Self, NetError> {
        spec.validate()?;
        let probe: ParamStore<T> = Self::fresh_params(&spec, &mut Rng::new(0));
        for (name, t) in probe.iter() {
            let have = params.get(name)?;
            if have.shape() != t.shape() {
                return Err(NetError::Mismatch {
                    layer: name.clone(),
                    detail: format!("stored shape {:?}, spec expects {:?}", have.shape(), t.shape()),
                });
            }
        }
        Ok(Purifier {
            spec,
            params,
            stats,
            input_encoder_calls: AtomicUsize::new(0),
        })
    }

    pub fn session(&self, mode: Mode, trainable: bool) -> Session<'_, T> {
        Session::new(&self.params, mode, trainable)
    }

    pub fn cast<U: Scalar>(&self) -> Purifier<U> {
        Purifier {
            spec: self.spec.clone(),
            params: self.params.cast(),
            stats: self.stats.clone(),
            input_encoder_calls: AtomicUsize::new(0),
        }
    }

    /// Number of times the input encoder has been evaluated.
    pub fn input_encoder_calls(&self) -> usize {
        self.input_encoder_calls.load(Ordering::Relaxed)
    }

    /// `x_std` must already be standardised with [`DatasetStats`].
    pub fn encode_input_graph(&self, g: &mut Graph<T>, sess: &mut Session<'_, T>, x_std: Var) -> Result<Var, NetError> {
        self.input_encoder_calls.fetch_add(1, Ordering::Relaxed);
        run_layers(g, sess, &self.spec.input_encoder, "input.", x_std, |_, _| {})
    }

    pub fn encode_conditioning_graph(
        &self,
        g: &mut Graph<T>,
        sess: &mut Session<'_, T>,
        rep: &[(String, Var)],
    ) -> Result<Var, NetError> {
        let mut parts = Vec::with_capacity(self.spec.repr_encoders.len());
        for enc in &self.spec.repr_encoders {
            let &(_, v) = rep
                .iter()
                .find(|(n, _)| *n == enc.capture)
                .ok_or_else(|| NetError::MissingCapture(enc.capture.clone()))?;
            let shape = g.value(v).shape();
            if shape.len() != 4 || shape[1..] != enc.input_shape {
                return Err(NetError::Mismatch {
                    layer: enc.capture.clone(),
                    detail: format!("expected (N, {:?}), got {shape:?}", enc.input_shape),
                });
            }
            parts.push(run_layers(g, sess, &enc.layers, &repr_prefix(&enc.capture), v, |_, _| {})?);
        }
        let joined = g.concat(&parts)?;
        run_layers(g, sess, &self.spec.fc_repr, "cond.", joined, |_, _| {})
    }

    /// Returns `(mu, logvar)`, with `logvar` clamped to [`LOGVAR_RANGE`].
    pub fn joint_encode_graph(
        &self,
        g: &mut Graph<T>,
        sess: &mut Session<'_, T>,
        xc: Var,
        cc: Var,
    ) -> Result<(Var, Var), NetError> {
        let joined = g.concat(&[xc, cc])?;
        let h = run_layers(g, sess, &self.spec.joint, "joint.", joined, |_, _| {})?;
        let mu = run_layers(g, sess, std::slice::from_ref(&self.spec.joint_mu), "joint.", h, |_, _| {})?;
        let lv = run_layers(g, sess, std::slice::from_ref(&self.spec.joint_logvar), "joint.", h, |_, _| {})?;
        let lv = g.clamp(lv, T::of(LOGVAR_RANGE.0), T::of(LOGVAR_RANGE.1));
        Ok((mu, lv))
    }

    /// `z = mu + exp(logvar / 2) * eps` on the graph, with `eps` supplied.
    pub fn reparameterize_graph(&self, g: &mut Graph<T>, mu: Var, logvar: Var, eps: Tensor<T>) -> Result<Var, NetError> {
        let half = g.scale(logvar, T::of(0.5));
        let sigma = g.exp(half);
        let e = g.constant(eps);
        let noise = g.mul(sigma, e)?;
        Ok(g.add(mu, noise)?)
    }

    /// Decoder output before the final sigmoid.
    pub fn decode_logits_graph(&self, g: &mut Graph<T>, sess: &mut Session<'_, T>, z: Var, cc: Var) -> Result<Var, NetError> {
        let width = g.value(z).row_len();
        if width != self.spec.fjoint {
            return Err(NetError::Mismatch {
                layer: "decoder".into(),
                detail: format!("latent width {width}, expected {}", self.spec.fjoint),
            });
        }
        let joined = g.concat(&[z, cc])?;
        let body = &self.spec.decoder[..self.spec.decoder.len() - 1];
        run_layers(g, sess, body, "decoder.", joined, |_, _| {})
    }

    pub fn decode_graph(&self, g: &mut Graph<T>, sess: &mut Session<'_, T>, z: Var, cc: Var) -> Result<Var, NetError> {
        let logits = self.decode_logits_graph(g, sess, z, cc)?;
        Ok(g.sigmoid(logits))
    }

    /// Evaluation-mode helpers without gradient tracking.
    pub fn encode_input(&self, x: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        let std = self.stats.standardize(x)?;
        self.eval(|p, g, s| {
            let v = g.constant(std);
            p.encode_input_graph(g, s, v)
        })
    }

    pub fn encode_conditioning(&self, rep: &InternalRepresentation<T>) -> Result<Tensor<T>, NetError> {
        self.eval(|p, g, s| {
            let vars: Vec<(String, Var)> = rep.layers.iter().map(|(n, t)| (n.clone(), g.constant(t.clone()))).collect();
            p.encode_conditioning_graph(g, s, &vars)
        })
    }

    pub fn joint_encode(&self, xc: &Tensor<T>, cc: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>), NetError> {
        let mut g = Graph::new();
        let mut s = self.session(Mode::Eval, false);
        let (a, b) = (g.constant(xc.clone()), g.constant(cc.clone()));
        let (mu, lv) = self.joint_encode_graph(&mut g, &mut s, a, b)?;
        Ok((g.value(mu).clone(), g.value(lv).clone()))
    }

    pub fn decode(&self, z: &Tensor<T>, cc: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        self.eval(|p, g, s| {
            let (a, b) = (g.constant(z.clone()), g.constant(cc.clone()));
            p.decode_graph(g, s, a, b)
        })
    }

    fn eval(
        &self,
        f: impl FnOnce(&Self, &mut Graph<T>, &mut Session<'_, T>) -> Result<Var, NetError>,
    ) -> Result<Tensor<T>, NetError> {
        let mut g = Graph::new();
        let mut s = self.session(Mode::Eval, false);
        let out = f(self, &mut g, &mut s)?;
        Ok(g.value(out).clone())
    }
}

/// `z = mu + exp(logvar / 2) * eps` with `eps ~ N(0, 1)` drawn from `rng`.
/// `logvar` is clamped to [`LOGVAR_RANGE`] first.
pub fn reparameterize<T: Scalar>(mu: &Tensor<T>, logvar: &Tensor<T>, rng: &mut Rng) -> Result<Tensor<T>, NetError> {
    if mu.shape() != logvar.shape() {
        return Err(NetError::Mismatch {
            layer: "reparameterize".into(),
            detail: format!("mu {:?} vs logvar {:?}", mu.shape(), logvar.shape()),
        });
    }
    let (lo, hi) = (T::of(LOGVAR_RANGE.0), T::of(LOGVAR_RANGE.1));
    let mut eps = Tensor::zeros(mu.shape());
    rng.fill_normal(eps.data_mut());
    let data = mu
        .data()
        .iter()
        .zip(logvar.data())
        .zip(eps.data())
        .map(|((&m, &lv), &e)| m + (lv.max(lo).min(hi) * T::of(0.5)).exp() * e)
        .collect();
    Ok(Tensor::new(mu.shape().to_vec(), data)?)
}
