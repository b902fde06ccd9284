//! Dense multi-class classifier used for entropy, Inception-style and FID scores.

use crate::error::{Error, Result};
use crate::nn::{softmax_rows, Activation, GradAt, Gradients, Mode, Network};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CLASSIFIER_WIDTHS: [usize; 5] = [784, 512, 256, 200, 10];
/// Index of the layer whose output is the 200-unit embedding.
pub const EMBEDDING_LAYER: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    pub net: Network,
}

pub struct Prediction {
    /// `[N × classes]`, rows on the probability simplex.
    pub proba: Tensor,
    /// `[N × 200]` penultimate-layer activations.
    pub embedding: Tensor,
}

pub struct LossOutput {
    pub loss: f64,
    pub correct: usize,
    pub grads: Gradients,
}

impl ClassifierModel {
    pub fn new(rng: &mut Rng) -> Result<Self> {
        Self::with_widths(&CLASSIFIER_WIDTHS, 0.10, rng)
    }

    pub fn with_widths(widths: &[usize], dropout: f32, rng: &mut Rng) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::InvalidArgument(
                "classifier needs an embedding layer before the output".into(),
            ));
        }
        Ok(Self {
            net: Network::with_widths(widths, Activation::Relu, Activation::Identity, dropout, rng)?,
        })
    }

    pub fn from_network(net: Network) -> Result<Self> {
        if net.layers.len() < 2 || net.layers.last().map(|l| l.activation) != Some(Activation::Identity) {
            return Err(Error::InvalidArgument("classifier network must end in a linear layer".into()));
        }
        Ok(Self { net })
    }

    pub fn num_classes(&self) -> usize {
        self.net.output_width()
    }

    fn embedding_index(&self) -> usize {
        self.net.layers.len() - 2
    }

    pub fn embedding_dim(&self) -> usize {
        self.net.layers[self.embedding_index()].outputs()
    }

    pub fn predict(&self, x: &Tensor) -> Result<Prediction> {
        let split = self.embedding_index() + 1;
        let embedding = self.net.eval_range(0..split, x)?;
        let logits = self.net.eval_range(split..self.net.layers.len(), &embedding)?;
        Ok(Prediction {
            proba: softmax_rows(&logits),
            embedding,
        })
    }

    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        Ok(softmax_rows(&self.net.eval(x)?))
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.net.eval_range(0..self.embedding_index() + 1, x)
    }

    /// Mean softmax cross-entropy on a labelled batch, with gradients.
    pub fn loss(&self, x: &Tensor, labels: &[u8], mode: Mode, rng: &mut Rng) -> Result<LossOutput> {
        let n = x.rows();
        if n == 0 || labels.len() != n {
            return Err(Error::Shape(format!("{n} inputs, {} labels", labels.len())));
        }
        let classes = self.num_classes();
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} for {classes} classes")));
        }
        let (logits, cache) = self.net.forward(x, mode, rng)?;
        let proba = softmax_rows(&logits);
        let mut loss = 0.0f64;
        let mut correct = 0;
        let mut g = proba.clone();
        let inv = 1.0 / n as f32;
        for (r, &label) in labels.iter().enumerate() {
            let row = proba.row(r);
            loss -= (row[label as usize].max(1e-30) as f64).ln();
            let argmax = argmax(row);
            if argmax == label as usize {
                correct += 1;
            }
            let grow = g.row_mut(r);
            grow[label as usize] -= 1.0;
            grow.iter_mut().for_each(|v| *v *= inv);
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross-entropy loss".into()));
        }
        let grads = self.net.backward(&cache, &g, GradAt::PreActivation)?;
        Ok(LossOutput { loss, correct, grads })
    }

    /// Fraction of correctly classified rows.
    pub fn accuracy(&self, x: &Tensor, labels: &[u8]) -> Result<f64> {
        let mut correct = 0usize;
        let batch = 2000;
        let mut start = 0;
        while start < x.rows() {
            let end = (start + batch).min(x.rows());
            let p = self.predict_proba(&x.slice_rows(start, end))?;
            for r in 0..end - start {
                if argmax(p.row(r)) == labels[start + r] as usize {
                    correct += 1;
                }
            }
            start = end;
        }
        Ok(correct as f64 / x.rows().max(1) as f64)
    }
}

pub fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probabilities_are_a_simplex() {
        let mut rng = Rng::new(0);
        let clf = ClassifierModel::new(&mut rng).unwrap();
        let x = Tensor::matrix(100, 784, (0..78400).map(|_| rng.uniform()).collect()).unwrap();
        let pred = clf.predict(&x).unwrap();
        assert_eq!(pred.embedding.shape(), &[100, 200]);
        for r in 0..100 {
            let s: f32 = pred.proba.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
            assert!(pred.proba.row(r).iter().all(|&p| p >= 0.0));
        }
        assert_eq!(clf.predict_proba(&x).unwrap(), pred.proba);
    }

    #[test]
    fn loss_rejects_out_of_range_labels() {
        let mut rng = Rng::new(1);
        let clf = ClassifierModel::with_widths(&[4, 3, 3, 2], 0.0, &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 4]);
        assert!(clf.loss(&x, &[2], Mode::Eval, &mut rng).is_err());
        assert!(clf.loss(&x, &[1], Mode::Eval, &mut rng).is_ok());
    }
}
