//! The classifier: three strided convolutions with leaky-ReLU, global
//! average pooling, and an affine head producing class logits.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::data::{IMG_H, IMG_W, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::graph::{CompGraph, NodeId};
use crate::kernels;
use crate::models::checkpoint;
use crate::rng::stage_rng;
use crate::tensor::Tensor;

pub(crate) const LEAKY_SLOPE: f32 = 0.01;
const WIDTHS: [usize; 3] = [8, 16, 32];

/// Uniform init in ±1/√fan_in, the usual convolution default.
pub(crate) fn init_weight(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Arc<Tensor> {
    let bound = 1.0 / (fan_in as f32).sqrt();
    Arc::new(Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound)))
}

pub struct Classifier {
    conv_w: [Arc<Tensor>; 3],
    conv_b: [Arc<Tensor>; 3],
    head_w: Arc<Tensor>,
    head_b: Arc<Tensor>,
}

impl Classifier {
    /// Fresh random weights (biases zero) from a dedicated stream.
    pub fn new(seed: u64) -> Self {
        let mut rng = stage_rng(seed, "classifier-init");
        let mut chans = vec![1];
        chans.extend(WIDTHS);
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        for i in 0..3 {
            let (ci, co) = (chans[i], chans[i + 1]);
            conv_w.push(init_weight(&mut rng, &[co, ci, 4, 4], ci * 16));
            conv_b.push(Arc::new(Tensor::zeros(&[co])));
        }
        let head_w = init_weight(&mut rng, &[NUM_CLASSES, WIDTHS[2]], WIDTHS[2]);
        let head_b = Arc::new(Tensor::zeros(&[NUM_CLASSES]));
        Classifier {
            conv_w: conv_w.try_into().unwrap(),
            conv_b: conv_b.try_into().unwrap(),
            head_w,
            head_b,
        }
    }

    pub fn input_shape() -> [usize; 3] {
        [1, IMG_H, IMG_W]
    }

    /// Appends the classifier to `g`, consuming the existing image node `x`.
    /// Returns the logits node and the parameter nodes by name.
    pub fn attach(
        &self,
        g: &mut CompGraph,
        x: NodeId,
    ) -> Result<(NodeId, Vec<(&'static str, NodeId)>)> {
        let mut params = Vec::new();
        let mut cur = x;
        for (i, name_pair) in [("conv1.w", "conv1.b"), ("conv2.w", "conv2.b"), ("conv3.w", "conv3.b")]
            .iter()
            .enumerate()
        {
            let w = g.shared(self.conv_w[i].clone());
            let b = g.shared(self.conv_b[i].clone());
            params.push((name_pair.0, w));
            params.push((name_pair.1, b));
            cur = g.conv2d(cur, w, b, 2, 1)?;
            cur = g.leaky_relu(cur, LEAKY_SLOPE)?;
        }
        let pooled = g.global_avg_pool(cur)?;
        let w = g.shared(self.head_w.clone());
        let b = g.shared(self.head_b.clone());
        params.push(("head.w", w));
        params.push(("head.b", b));
        let logits = g.affine(pooled, w, b)?;
        Ok((logits, params))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = CompGraph::new();
        let input = g.input("x", &Self::input_shape());
        let (logits, _) = self.attach(&mut g, input)?;
        g.forward(&[("x", x)])?;
        Ok(g.value(logits)?.clone())
    }

    /// Softmax class probabilities.
    pub fn probabilities(&self, x: &Tensor) -> Result<Vec<f32>> {
        Ok(kernels::softmax(self.logits(x)?.data()))
    }

    /// Softmax probability of `class`.
    pub fn confidence(&self, x: &Tensor, class: usize) -> Result<f32> {
        if class >= NUM_CLASSES {
            return Err(Error::invalid(format!("class {class} out of range")));
        }
        Ok(self.probabilities(x)?[class])
    }

    /// Softmax probability of `class` together with its gradient w.r.t. the
    /// input image: the ∂𝒞/∂xᵢ provider for path attributions.
    pub fn prob_and_input_grad(&self, x: &Tensor, class: usize) -> Result<(f32, Tensor)> {
        if class >= NUM_CLASSES {
            return Err(Error::invalid(format!("class {class} out of range")));
        }
        let mut g = CompGraph::new();
        let input = g.input("x", &Self::input_shape());
        let (logits, _) = self.attach(&mut g, input)?;
        let prob = g.softmax_prob(logits, class)?;
        g.forward(&[("x", x)])?;
        let value = g.value(prob)?.scalar_value()?;
        let grads = g.backward(prob, &[input])?;
        Ok((value, grads.grads.into_iter().next().unwrap()))
    }

    /// Parameters in a stable order, shared.
    pub fn params(&self) -> Vec<(&'static str, Arc<Tensor>)> {
        vec![
            ("conv1.w", self.conv_w[0].clone()),
            ("conv1.b", self.conv_b[0].clone()),
            ("conv2.w", self.conv_w[1].clone()),
            ("conv2.b", self.conv_b[1].clone()),
            ("conv3.w", self.conv_w[2].clone()),
            ("conv3.b", self.conv_b[2].clone()),
            ("head.w", self.head_w.clone()),
            ("head.b", self.head_b.clone()),
        ]
    }

    /// Mutable handles in the same order as [`Classifier::params`].
    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Arc<Tensor>)> {
        let [c1w, c2w, c3w] = &mut self.conv_w;
        let [c1b, c2b, c3b] = &mut self.conv_b;
        vec![
            ("conv1.w", c1w),
            ("conv1.b", c1b),
            ("conv2.w", c2w),
            ("conv2.b", c2b),
            ("conv3.w", c3w),
            ("conv3.b", c3b),
            ("head.w", &mut self.head_w),
            ("head.b", &mut self.head_b),
        ]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let params = self.params();
        let named: Vec<(&str, &Tensor)> = params.iter().map(|(n, t)| (*n, t.as_ref())).collect();
        checkpoint::save(
            dir,
            &named,
            &[
                ("kind", "classifier".into()),
                ("classes", NUM_CLASSES.to_string()),
                ("widths", format!("{},{},{}", WIDTHS[0], WIDTHS[1], WIDTHS[2])),
            ],
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut ck = checkpoint::load(dir)?;
        if ck.meta.get("kind").map(String::as_str) != Some("classifier") {
            return Err(Error::Corrupt(format!("{} is not a classifier checkpoint", dir.display())));
        }
        let mut chans = vec![1];
        chans.extend(WIDTHS);
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        for (i, name_pair) in [("conv1.w", "conv1.b"), ("conv2.w", "conv2.b"), ("conv3.w", "conv3.b")]
            .iter()
            .enumerate()
        {
            let (ci, co) = (chans[i], chans[i + 1]);
            conv_w.push(ck.take(name_pair.0, &[co, ci, 4, 4])?);
            conv_b.push(ck.take(name_pair.1, &[co])?);
        }
        Ok(Classifier {
            conv_w: conv_w.try_into().unwrap(),
            conv_b: conv_b.try_into().unwrap(),
            head_w: ck.take("head.w", &[NUM_CLASSES, WIDTHS[2]])?,
            head_b: ck.take("head.b", &[NUM_CLASSES])?,
        })
    }
}
