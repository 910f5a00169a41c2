use rand::Rng;

use crate::autodiff::{standard_normal, xavier_uniform, BatchNormMode, BatchStats, Binding, Graph, ParamId, ParamSet, Real, Tensor, Var};
use crate::error::Result;

/// Per-call state threaded through a model forward pass.
pub struct Ctx<'p, T: Real> {
    pub params: &'p ParamSet<T>,
    pub binding: Binding,
    pub train: bool,
    pub eps: T,
    stats: Vec<(BatchNorm, BatchStats<T>)>,
}

impl<'p, T: Real> Ctx<'p, T> {
    /// Binds `params` into `g`.
    pub fn new(g: &mut Graph<T>, params: &'p ParamSet<T>, train: bool) -> Self {
        Self {
            params,
            binding: params.bind(g),
            train,
            eps: T::lit(1e-5),
            stats: Vec::new(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.binding.var(id)
    }

    /// Batch statistics collected by training-mode normalisation layers.
    pub fn into_stats(self) -> (Binding, Vec<(BatchNorm, BatchStats<T>)>) {
        (self.binding, self.stats)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// Xavier-uniform weights and `N(0, 1)` biases.
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        shape: [usize; 4],
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let [o, i, kh, kw] = shape;
        let rf = kh * kw;
        let weight = params.add(format!("{name}.weight"), xavier_uniform(&shape, i * rf, o * rf, rng), true);
        let bias = params.add(format!("{name}.bias"), standard_normal(&[o], rng), true);
        Self { weight, bias, stride, padding }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        g.conv2d(x, ctx.var(self.weight), ctx.var(self.bias), self.stride, self.padding)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: Tensor<T>,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(format!("{name}.weight"), xavier_uniform(&[outputs, inputs], inputs, outputs, rng), true);
        let bias = params.add(format!("{name}.bias"), bias, true);
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        g.dense(x, ctx.var(self.weight), ctx.var(self.bias))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(params: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: params.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: params.add(format!("{name}.running_var"), Tensor::ones(&[channels]), false),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.var(self.gamma), ctx.var(self.beta));
        let mode = if ctx.train {
            BatchNormMode::Train { eps: ctx.eps }
        } else {
            BatchNormMode::Eval {
                mean: ctx.params.get(self.running_mean).data(),
                var: ctx.params.get(self.running_var).data(),
                eps: ctx.eps,
            }
        };
        let (y, stats) = g.batch_norm2d(x, gamma, beta, mode)?;
        if let Some(s) = stats {
            ctx.stats.push((*self, s));
        }
        Ok(y)
    }
}

/// Folds batch statistics into running estimates:
/// `running = (1 - momentum) * running + momentum * batch`, with the
/// unbiased batch variance.
pub fn update_running_stats<T: Real>(params: &mut ParamSet<T>, stats: &[(BatchNorm, BatchStats<T>)], momentum: f64) {
    let m = T::lit(momentum);
    let keep = T::one() - m;
    for (bn, s) in stats {
        let correction = if s.count > 1 {
            T::lit(s.count as f64 / (s.count - 1) as f64)
        } else {
            T::one()
        };
        for (r, &b) in params.get_mut(bn.running_mean).data_mut().iter_mut().zip(&s.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in params.get_mut(bn.running_var).data_mut().iter_mut().zip(&s.var) {
            *r = keep * *r + m * b * correction;
        }
    }
}

/// `kernel / 2` padding keeps odd kernels centred.
pub fn same_padding(kernel: usize) -> usize {
    kernel / 2
}

/// Output extent of a convolution.
pub fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    (size + 2 * padding).checked_sub(kernel).map(|v| v / stride + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn running_stats_follow_momentum() {
        let mut ps = ParamSet::<f64>::new();
        let bn = BatchNorm::new(&mut ps, "bn", 1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let mut ctx = Ctx::new(&mut g, &ps, true);
        bn.forward(&mut g, &mut ctx, x).unwrap();
        let (_, stats) = ctx.into_stats();
        update_running_stats(&mut ps, &stats, 0.1);
        assert!((ps.get(bn.running_mean).data()[0] - 0.4).abs() < 1e-12);
        // unbiased variance of {1,3,5,7} is 20/3
        let expected = 0.9 + 0.1 * 20.0 / 3.0;
        assert!((ps.get(bn.running_var).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn conv_init_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::<f64>::new();
        let c = Conv::new(&mut ps, "c", [64, 32, 3, 3], 1, 1, &mut rng);
        let bound = (6.0 / ((32 + 64) * 9) as f64).sqrt();
        assert!(ps.get(c.weight).data().iter().all(|w| w.abs() <= bound));
        let b = ps.get(c.bias).data();
        let mean = b.iter().sum::<f64>() / b.len() as f64;
        assert!(mean.abs() < 0.5);
        assert!(b.iter().any(|v| v.abs() > bound));
    }

    #[test]
    fn conv_out_arithmetic() {
        assert_eq!(conv_out(256, 5, 2, 2), Some(128));
        assert_eq!(conv_out(8, 1, 4, 0), Some(2));
        assert_eq!(conv_out(2, 5, 1, 0), None);
    }
}
