//! First-order parameter updates shared by field and descriptor training.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UpdateRule {
    /// Gradient descent with heavy-ball momentum (0 disables it).
    Momentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl UpdateRule {
    pub fn sgd() -> Self {
        UpdateRule::Momentum { momentum: 0.0 }
    }

    pub fn adam() -> Self {
        UpdateRule::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for one flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Descent {
    rule: UpdateRule,
    step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Descent {
    pub fn new(rule: UpdateRule, len: usize) -> Self {
        let second = match rule {
            UpdateRule::Adam { .. } => vec![0.0; len],
            UpdateRule::Momentum { .. } => Vec::new(),
        };
        Descent {
            rule,
            step: 0,
            first: vec![0.0; len],
            second,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.update(params, grad, |_| lr);
    }

    /// Like [`Descent::apply`], with rate `lr_head` for the first `split`
    /// parameters and `lr_tail` for the rest.
    pub fn apply_split(&mut self, params: &mut [f64], grad: &[f64], split: usize, lr_head: f64, lr_tail: f64) {
        self.update(params, grad, |i| if i < split { lr_head } else { lr_tail });
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], lr: impl Fn(usize) -> f64) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.first.len());
        self.step += 1;
        match self.rule {
            UpdateRule::Momentum { momentum } => {
                for (i, ((p, g), v)) in params.iter_mut().zip(grad).zip(&mut self.first).enumerate() {
                    *v = momentum * *v + g;
                    *p -= lr(i) * *v;
                }
            }
            UpdateRule::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for (i, (((p, g), m), v)) in params
                    .iter_mut()
                    .zip(grad)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                    .enumerate()
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr(i) * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                }
            }
        }
    }

    /// Serializes the step count and moment buffers (f64, little-endian).
    pub fn write_state<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.first.len() as u64).to_le_bytes())?;
        w.write_all(&(self.second.len() as u64).to_le_bytes())?;
        for v in self.first.iter().chain(&self.second) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_state<R: Read>(rule: UpdateRule, r: &mut R) -> std::io::Result<Self> {
        let mut word = [0u8; 8];
        let mut next = |r: &mut R| -> std::io::Result<u64> {
            r.read_exact(&mut word)?;
            Ok(u64::from_le_bytes(word))
        };
        let step = next(r)?;
        let n1 = next(r)? as usize;
        let n2 = next(r)? as usize;
        let expected_second = match rule {
            UpdateRule::Adam { .. } => n1,
            UpdateRule::Momentum { .. } => 0,
        };
        if n2 != expected_second {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "optimizer state does not match update rule",
            ));
        }
        let mut read_vec = |n: usize| -> std::io::Result<Vec<f64>> {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let first = read_vec(n1)?;
        let second = read_vec(n2)?;
        Ok(Descent {
            rule,
            step,
            first,
            second,
        })
    }
}
