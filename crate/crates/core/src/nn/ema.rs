use crate::error::{Error, Result};

use super::BackboneParams;

/// Exponential moving average of backbone parameters (the mean-teacher copy).
#[derive(Clone, Debug, PartialEq)]
pub struct EmaParams {
    pub shadow: BackboneParams,
    pub decay: f64,
}

impl EmaParams {
    pub fn new(source: &BackboneParams, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::invalid(
                "ema",
                format!("decay {decay} outside [0, 1]"),
            ));
        }
        Ok(EmaParams {
            shadow: source.clone(),
            decay,
        })
    }

    /// `shadow ← decay·shadow + (1 − decay)·source` for every trainable tensor
    /// (batch-norm affine included); running statistics are copied verbatim.
    pub fn update(&mut self, source: &BackboneParams) {
        let d = self.decay;
        for (s, src) in self
            .shadow
            .trainable_mut()
            .into_iter()
            .zip(source.trainable())
        {
            for (a, b) in s.data_mut().iter_mut().zip(src.data()) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
        for (dst, src) in [
            (&mut self.shadow.block1.bn, &source.block1.bn),
            (&mut self.shadow.block2.bn, &source.block2.bn),
        ] {
            dst.running_mean = src.running_mean.clone();
            dst.running_var = src.running_var.clone();
        }
    }

    /// Euclidean distance between shadow and source trainable tensors.
    pub fn distance(&self, source: &BackboneParams) -> f64 {
        self.shadow
            .trainable()
            .iter()
            .zip(source.trainable())
            .flat_map(|(a, b)| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x - y) * (x - y))
            })
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_backbone;

    fn fill(p: &mut BackboneParams, v: f64) {
        for t in p.trainable_mut() {
            t.data_mut().fill(v);
        }
    }

    #[test]
    fn decay_extremes() {
        let mut src = init_backbone(0, 5, 10, 3).unwrap();
        fill(&mut src, 4.0);
        let mut shadow = src.clone();
        fill(&mut shadow, 2.0);

        let mut ema = EmaParams {
            shadow: shadow.clone(),
            decay: 0.0,
        };
        ema.update(&src);
        assert_eq!(ema.shadow.trainable(), src.trainable());

        let mut ema = EmaParams {
            shadow: shadow.clone(),
            decay: 1.0,
        };
        ema.update(&src);
        assert_eq!(ema.shadow.trainable(), shadow.trainable());

        let mut ema = EmaParams { shadow, decay: 0.5 };
        ema.update(&src);
        assert!(ema
            .shadow
            .trainable()
            .iter()
            .all(|t| t.data().iter().all(|&v| v == 3.0)));
    }

    #[test]
    fn update_is_a_contraction() {
        let src = init_backbone(1, 5, 10, 3).unwrap();
        let mut ema = EmaParams::new(&init_backbone(2, 5, 10, 3).unwrap(), 0.9).unwrap();
        let mut prev = ema.distance(&src);
        for _ in 0..10 {
            ema.update(&src);
            let d = ema.distance(&src);
            assert!(d <= 0.9 * prev + 1e-12);
            prev = d;
        }
    }

    #[test]
    fn running_stats_are_copied() {
        let mut src = init_backbone(1, 5, 10, 3).unwrap();
        src.block1.bn.running_mean.data_mut().fill(0.7);
        let mut ema = EmaParams::new(&init_backbone(1, 5, 10, 3).unwrap(), 0.99).unwrap();
        ema.update(&src);
        assert_eq!(
            ema.shadow.block1.bn.running_mean,
            src.block1.bn.running_mean
        );
    }
}
