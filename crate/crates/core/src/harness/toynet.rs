use rand::Rng;

use crate::denodet::{DenoConfig, DenoModule, DenoParams};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// What the toy network is trained to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    /// Regress the clean scene (MSE); the network predicts a residual on top of its input.
    Denoise,
    /// Per-pixel target logits (binary cross-entropy against the mask).
    Detect,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Denoise => "denoise",
            Task::Detect => "detect",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "denoise" => Some(Task::Denoise),
            "detect" => Some(Task::Detect),
            _ => None,
        }
    }
}

/// `conv3x3(1→C) → tanh → DenoModule → conv3x3(C→1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    pub conv_in_w: Tensor,
    pub conv_in_b: Tensor,
    pub deno: DenoModule,
    pub conv_out_w: Tensor,
    pub conv_out_b: Tensor,
    pub task: Task,
}

/// Scalar loss plus the handles needed to read gradients.
pub struct Recorded<'t> {
    pub output: Var<'t>,
    pub loss: Var<'t>,
    pub params: Vec<Var<'t>>,
    pub imag_residue: f64,
}

impl ToyNet {
    pub fn new<R: Rng + ?Sized>(channels: usize, config: DenoConfig, task: Task, rng: &mut R) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("ToyNet needs at least one channel".into()));
        }
        let c = channels;
        let fan_in = (9.0f64).sqrt();
        let fan_mid = (9.0 * c as f64).sqrt();
        let conv_in_w = Tensor::uniform(&[c, 1, 3, 3], -1.0 / fan_in, 1.0 / fan_in, rng);
        let conv_out_w = Tensor::uniform(&[1, c, 3, 3], -0.1 / fan_mid, 0.1 / fan_mid, rng);
        let deno = DenoModule::seeded(config, rng)?;
        Ok(ToyNet {
            conv_in_w,
            conv_in_b: Tensor::zeros(&[c]),
            deno,
            conv_out_w,
            conv_out_b: Tensor::zeros(&[1]),
            task,
        })
    }

    pub fn with_identity_module(mut self) -> Result<Self> {
        self.deno = DenoModule::identity(*self.deno.config())?;
        Ok(self)
    }

    pub fn channels(&self) -> usize {
        self.conv_in_w.shape()[0]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.conv_in_w, &self.conv_in_b];
        out.extend(self.deno.params().tensors());
        out.extend([&self.conv_out_w, &self.conv_out_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.conv_in_w, &mut self.conv_in_b];
        out.extend(self.deno.params_mut().tensors_mut());
        out.extend([&mut self.conv_out_w, &mut self.conv_out_b]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn deno_params(&self) -> &DenoParams {
        self.deno.params()
    }

    /// Records the network on `tape` for a `1×H×W` input.
    pub fn record<'t>(&self, tape: &'t Tape, input: &Tensor, target: &Tensor) -> Result<Recorded<'t>> {
        let x = tape.leaf(input.clone());
        let w_in = tape.leaf(self.conv_in_w.clone());
        let b_in = tape.leaf(self.conv_in_b.clone());
        let bound = self.deno.params().bind(tape);
        let w_out = tape.leaf(self.conv_out_w.clone());
        let b_out = tape.leaf(self.conv_out_b.clone());

        let features = tape.conv3x3(x, w_in, b_in)?.tanh();
        let fv = self.deno.forward_var(features, &bound)?;
        let head = tape.conv3x3(fv.output, w_out, b_out)?;
        let t = tape.leaf(target.clone());
        let (output, loss) = match self.task {
            Task::Denoise => {
                let out = x.add(head)?;
                (out, out.sub(t)?.square()?.mean())
            }
            Task::Detect => {
                // softplus(z) − t·z is the logit form of binary cross-entropy
                let loss = head.softplus().sub(head.mul(t)?)?.mean();
                (head, loss)
            }
        };
        let mut params = vec![w_in, b_in];
        params.extend(bound.vars());
        params.extend([w_out, b_out]);
        Ok(Recorded {
            output,
            loss,
            params,
            imag_residue: fv.imag_residue,
        })
    }

    /// Loss and per-tensor gradients for one example.
    pub fn loss_and_grads(&self, input: &Tensor, target: &Tensor) -> Result<(f64, Vec<Tensor>, f64)> {
        let tape = Tape::new();
        let rec = self.record(&tape, input, target)?;
        let loss = rec.loss.value().data()[0];
        let grads = tape.backward(rec.loss)?;
        let g = rec.params.iter().map(|&p| grads.wrt(p)).collect();
        Ok((loss, g, rec.imag_residue))
    }

    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let rec = self.record(&tape, input, &Tensor::zeros(input.shape()))?;
        let out = (*rec.output.value()).clone();
        Ok(out)
    }

    pub fn loss(&self, input: &Tensor, target: &Tensor) -> Result<f64> {
        let tape = Tape::new();
        let rec = self.record(&tape, input, target)?;
        let v = rec.loss.value().data()[0];
        Ok(v)
    }
}
