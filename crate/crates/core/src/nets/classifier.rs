use serde::{Deserialize, Serialize};

use super::{infer_shape, init_layers, run_layers, Layer, Mode, NetError, ParamStore, Session};
use crate::autodiff::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    /// (channels, height, width) of one input image.
    pub input_shape: [usize; 3],
    pub layers: Vec<Layer>,
    /// Convolutions whose pre-normalisation outputs form the internal
    /// representation, in forward order.
    pub capture: Vec<String>,
    pub num_classes: usize,
}

impl ClassifierSpec {
    /// Four conv blocks (conv, batch norm, leaky ReLU) followed by two linear
    /// layers. The second and fourth convolutions halve the spatial extent.
    /// Every block's convolution is captured.
    pub fn desk(input_shape: [usize; 3], widths: [usize; 4], hidden: usize, num_classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut capture = Vec::new();
        let mut cin = input_shape[0];
        for (i, &w) in widths.iter().enumerate() {
            let stride = if i % 2 == 1 { 2 } else { 1 };
            let conv = format!("block{i}.conv");
            layers.push(Layer::conv(&conv, cin, w, 3, stride, 1, false));
            layers.push(Layer::batch_norm(&format!("block{i}.bn"), w));
            layers.push(Layer::leaky());
            capture.push(conv);
            cin = w;
        }
        let flat = widths[3] * input_shape[1].div_ceil(4) * input_shape[2].div_ceil(4);
        layers.push(Layer::Flatten);
        layers.push(Layer::linear("fc1", flat, hidden, true));
        layers.push(Layer::leaky());
        layers.push(Layer::linear("fc2", hidden, num_classes, true));
        ClassifierSpec {
            input_shape,
            layers,
            capture,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let out = infer_shape(&self.layers, &self.input_shape)?;
        if out != [self.num_classes] {
            return Err(NetError::Spec(format!(
                "classifier emits {out:?}, expected {} logits",
                self.num_classes
            )));
        }
        let conv_order: Vec<&str> = self
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::Conv2d { .. }))
            .filter_map(Layer::name)
            .collect();
        let mut last = None;
        for name in &self.capture {
            let pos = conv_order
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| NetError::Spec(format!("capture layer `{name}` is not a convolution of the classifier")))?;
            if last.is_some_and(|l| pos <= l) {
                return Err(NetError::Spec(format!("capture layer `{name}` is out of forward order")));
            }
            last = Some(pos);
        }
        Ok(())
    }

    /// (name, [channels, height, width]) of every captured tensor.
    pub fn capture_shapes(&self) -> Result<Vec<(String, [usize; 3])>, NetError> {
        let mut shape = self.input_shape.to_vec();
        let mut out = Vec::new();
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
            if let Some(name) = layer.name() {
                if matches!(layer, Layer::Conv2d { .. }) && self.capture.iter().any(|c| c == name) {
                    out.push((name.to_string(), [shape[0], shape[1], shape[2]]));
                }
            }
        }
        Ok(out)
    }
}

/// Captured convolution outputs of one forward pass, in capture order.
#[derive(Clone, Debug, PartialEq)]
pub struct InternalRepresentation<T: Scalar = f32> {
    pub layers: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> InternalRepresentation<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn map(&self, f: impl Fn(&Tensor<T>) -> Tensor<T>) -> Self {
        InternalRepresentation {
            layers: self.layers.iter().map(|(n, t)| (n.clone(), f(t))).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Classifier<T: Scalar = f32> {
    pub spec: ClassifierSpec,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Classifier<T> {
    pub fn init(spec: ClassifierSpec, seed: u64) -> Result<Self, NetError> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut rng = Rng::stream(seed, &[0xC1A5]);
        init_layers(&spec.layers, "", &mut rng, &mut params);
        Ok(Classifier { spec, params })
    }

    pub fn from_parts(spec: ClassifierSpec, params: ParamStore<T>) -> Result<Self, NetError> {
        spec.validate()?;
        let mut probe = ParamStore::<T>::new();
        init_layers(&spec.layers, "", &mut Rng::new(0), &mut probe);
        for (name, t) in probe.iter() {
            let have = params.get(name)?;
            if have.shape() != t.shape() {
                return Err(NetError::Mismatch {
                    layer: name.clone(),
                    detail: format!("stored shape {:?}, spec expects {:?}", have.shape(), t.shape()),
                });
            }
        }
        Ok(Classifier { spec, params })
    }

    pub fn session(&self, mode: Mode, trainable: bool) -> Session<'_, T> {
        Session::new(&self.params, mode, trainable)
    }

    pub fn cast<U: Scalar>(&self) -> Classifier<U> {
        Classifier {
            spec: self.spec.clone(),
            params: self.params.cast(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), NetError> {
        if shape.len() != 4 || shape[1..] != self.spec.input_shape {
            return Err(NetError::Mismatch {
                layer: "input".into(),
                detail: format!("expected (N, {:?}), got {shape:?}", self.spec.input_shape),
            });
        }
        Ok(())
    }

    /// Records the forward pass on `g`. With `capture`, also returns the graph
    /// nodes of every capture layer in capture order.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        sess: &mut Session<'_, T>,
        x: Var,
        capture: bool,
    ) -> Result<(Var, Option<Vec<(String, Var)>>), NetError> {
        self.check_input(g.value(x).shape())?;
        let mut taps = Vec::new();
        let logits = run_layers(g, sess, &self.spec.layers, "", x, |name, v| {
            if capture && self.spec.capture.iter().any(|c| c == name) {
                taps.push((name.to_string(), v));
            }
        })?;
        Ok((logits, capture.then_some(taps)))
    }

    /// Evaluation-mode forward pass without gradient tracking.
    pub fn forward(&self, x: &Tensor<T>, capture: bool) -> Result<(Tensor<T>, Option<InternalRepresentation<T>>), NetError> {
        let mut g = Graph::new();
        let mut sess = self.session(Mode::Eval, false);
        let xv = g.constant(x.clone());
        let (logits, taps) = self.forward_graph(&mut g, &mut sess, xv, capture)?;
        let rep = taps.map(|taps| InternalRepresentation {
            layers: taps.into_iter().map(|(n, v)| (n, g.value(v).clone())).collect(),
        });
        Ok((g.value(logits).clone(), rep))
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        Ok(self.forward(x, false)?.0)
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>, NetError> {
        Ok(self.logits(x)?.argmax_rows())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Classifier<f32> {
        Classifier::init(ClassifierSpec::desk([1, 28, 28], [4, 4, 8, 8], 16, 10), 1).unwrap()
    }

    #[test]
    fn forward_shapes_and_capture() {
        let c = small();
        let x = Tensor::full(&[2, 1, 28, 28], 0.3f32);
        let (logits, rep) = c.forward(&x, true).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
        let rep = rep.unwrap();
        assert_eq!(rep.layers.len(), 4);
        let shapes = c.spec.capture_shapes().unwrap();
        assert_eq!(shapes[1].1, [4, 14, 14]);
        assert_eq!(shapes[3].1, [8, 7, 7]);
        for ((n, t), (m, s)) in rep.layers.iter().zip(&shapes) {
            assert_eq!(n, m);
            assert_eq!(&t.shape()[1..], s);
        }
        let (plain, none) = c.forward(&x, false).unwrap();
        assert!(none.is_none());
        assert_eq!(plain, logits);
    }

    #[test]
    fn rejects_unknown_or_unordered_capture() {
        let mut spec = ClassifierSpec::desk([1, 28, 28], [4, 4, 8, 8], 16, 10);
        spec.capture = vec!["block2.conv".into(), "block0.conv".into()];
        assert!(spec.validate().is_err());
        spec.capture = vec!["nope".into()];
        assert!(spec.validate().unwrap_err().to_string().contains("nope"));
    }

    #[test]
    fn wrong_input_shape_is_reported() {
        let c = small();
        let err = c.forward(&Tensor::zeros(&[1, 3, 28, 28]), false).unwrap_err();
        assert!(err.to_string().contains("input"));
    }
}
