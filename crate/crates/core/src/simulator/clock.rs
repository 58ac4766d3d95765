use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockKind {
    /// Synchronous rounds; time comes from the straggler model.
    Lockstep,
    /// Independent rate-`rate_per_node` Poisson clocks per node.
    Poisson,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockModel {
    pub kind: ClockKind,
    pub rate_per_node: f64,
}

impl ClockModel {
    pub fn lockstep() -> Self {
        ClockModel {
            kind: ClockKind::Lockstep,
            rate_per_node: 1.0,
        }
    }

    pub fn poisson(rate_per_node: f64) -> Self {
        ClockModel {
            kind: ClockKind::Poisson,
            rate_per_node,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_per_node.is_finite() && self.rate_per_node > 0.0) {
            return Err(Error::invalid(format!(
                "clock rate must be positive, got {}",
                self.rate_per_node
            )));
        }
        Ok(())
    }
}

/// Next master-clock event: the superposition of `p` node clocks is a
/// rate `p * rate_per_node` process whose ticking node is uniform.
pub fn sample_next_event(clock: &ClockModel, p: usize, rng: &mut StreamRng) -> Result<(f64, usize)> {
    if clock.kind != ClockKind::Poisson {
        return Err(Error::Unsupported("event sampling needs a poisson clock".into()));
    }
    clock.validate()?;
    if p == 0 {
        return Err(Error::Empty("no nodes to tick"));
    }
    let exp = Exp::new(p as f64 * clock.rate_per_node)
        .map_err(|e| Error::invalid(format!("clock rate: {e}")))?;
    let gap = loop {
        let g: f64 = exp.sample(rng);
        if g > 0.0 {
            break g;
        }
    };
    Ok((gap, rng.random_range(0..p)))
}

/// Per-round compute time of a node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StragglerModel {
    Constant {
        c: f64,
    },
    LogNormal {
        mu: f64,
        sigma: f64,
    },
    /// Every node takes `c` except `slow_node`, which takes `c * slow_factor`.
    ConstantWithOutlier {
        c: f64,
        slow_factor: f64,
        slow_node: usize,
    },
}

impl Default for StragglerModel {
    fn default() -> Self {
        StragglerModel::Constant { c: 1.0 }
    }
}

impl StragglerModel {
    pub fn validate(&self, p: usize) -> Result<()> {
        let positive = |name: &str, x: f64| {
            if x.is_finite() && x > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("straggler {name} must be positive, got {x}")))
            }
        };
        match *self {
            StragglerModel::Constant { c } => positive("c", c),
            StragglerModel::LogNormal { mu, sigma } => {
                if !mu.is_finite() || !(sigma.is_finite() && sigma >= 0.0) {
                    return Err(Error::invalid(format!(
                        "lognormal straggler needs finite mu and sigma >= 0, got ({mu}, {sigma})"
                    )));
                }
                Ok(())
            }
            StragglerModel::ConstantWithOutlier {
                c,
                slow_factor,
                slow_node,
            } => {
                positive("c", c)?;
                positive("slow_factor", slow_factor)?;
                if slow_node >= p {
                    return Err(Error::IndexOutOfRange {
                        index: slow_node,
                        len: p,
                    });
                }
                Ok(())
            }
        }
    }
}

/// Draws one compute duration for `node`. Deterministic models consume
/// nothing from `rng`.
pub fn apply_straggler(model: &StragglerModel, node: usize, rng: &mut StreamRng) -> f64 {
    match *model {
        StragglerModel::Constant { c } => c,
        StragglerModel::LogNormal { mu, sigma } => {
            // validated sigma >= 0 makes construction infallible
            let d = LogNormal::new(mu, sigma).expect("validated lognormal parameters");
            loop {
                let x: f64 = d.sample(rng);
                if x > 0.0 {
                    break x;
                }
            }
        }
        StragglerModel::ConstantWithOutlier {
            c,
            slow_factor,
            slow_node,
        } => {
            if node == slow_node {
                c * slow_factor
            } else {
                c
            }
        }
    }
}
