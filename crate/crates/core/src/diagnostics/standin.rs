//! Quadratic stand-in game with closed-form objectives, used to give the
//! diagnostics exact answers.
//!
//! For type `xi` with center `c`:
//!
//! ```text
//! L_D(theta, phi) = -(a/2) |theta - c|^2 + b theta . phi
//! L_A(theta, phi) = -(mu/2) |phi - theta|^2
//! ```
//!
//! The defender adapts with `theta' = theta + eta grad_theta L_D`, so the
//! adapted objective's gradient is `(1 - eta a) grad_theta L_D(theta', phi)`.
//! Rule types use `phi = 0`.

use std::collections::BTreeMap;

use super::probes::{BlockGradients, LipschitzBlock, Objective};
use super::residual::ResidualOracle;
use crate::error::{Error, Result};
use crate::game::AttackTypeSpec;
use crate::policy::PolicyParams;
use crate::rng::SeedStream;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticStandIn {
    pub a: f64,
    pub b: f64,
    pub mu: f64,
    pub eta: f64,
    pub centers: BTreeMap<u32, Vec<f64>>,
}

impl QuadraticStandIn {
    fn center(&self, id: u32) -> Result<&[f64]> {
        self.centers
            .get(&id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::validation(format!("stand-in has no center for type {id}")))
    }

    pub fn defender_gradient(&self, id: u32, theta: &[f64], phi: &[f64]) -> Result<Vec<f64>> {
        let c = self.center(id)?;
        Ok(theta
            .iter()
            .zip(c)
            .zip(phi)
            .map(|((t, c), p)| -self.a * (t - c) + self.b * p)
            .collect())
    }

    pub fn adapted(&self, id: u32, theta: &[f64], phi: &[f64]) -> Result<Vec<f64>> {
        let g = self.defender_gradient(id, theta, phi)?;
        Ok(theta.iter().zip(&g).map(|(t, g)| t + self.eta * g).collect())
    }

    /// Gradient of `theta -> L_D(theta', phi)`.
    pub fn meta_gradient(&self, id: u32, theta: &[f64], phi: &[f64]) -> Result<Vec<f64>> {
        let adapted = self.adapted(id, theta, phi)?;
        let g = self.defender_gradient(id, &adapted, phi)?;
        let k = 1.0 - self.eta * self.a;
        Ok(g.iter().map(|v| k * v).collect())
    }

    pub fn attacker_value(&self, theta: &[f64], phi: &[f64]) -> f64 {
        -0.5 * self.mu * phi.iter().zip(theta).map(|(p, t)| (p - t).powi(2)).sum::<f64>()
    }

    pub fn attacker_gradient(&self, theta: &[f64], phi: &[f64]) -> Vec<f64> {
        phi.iter().zip(theta).map(|(p, t)| -self.mu * (p - t)).collect()
    }

    /// The joint stationary point for a single type: `theta = phi = c a / (a - b)`.
    pub fn stationary_point(&self, id: u32) -> Result<Vec<f64>> {
        if self.a == self.b {
            return Err(Error::validation("stand-in with a == b has no stationary point"));
        }
        let k = self.a / (self.a - self.b);
        Ok(self.center(id)?.iter().map(|c| c * k).collect())
    }

    /// The attacker objective in `phi` at fixed `theta`.
    pub fn attacker_objective(&self, theta: Vec<f64>) -> StandInAttacker<'_> {
        StandInAttacker { game: self, theta }
    }
}

impl ResidualOracle for QuadraticStandIn {
    fn gradients(
        &self,
        ty: &AttackTypeSpec,
        theta: &PolicyParams,
        phi: Option<&PolicyParams>,
        _stream: SeedStream,
    ) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let zeros = vec![0.0; theta.dim()];
        let p = phi.map(|p| p.flat.as_slice()).unwrap_or(&zeros);
        let g = self.meta_gradient(ty.id, &theta.flat, p)?;
        let ga = match phi {
            Some(p) => {
                let adapted = self.adapted(ty.id, &theta.flat, &p.flat)?;
                Some(self.attacker_gradient(&adapted, &p.flat))
            }
            None => None,
        };
        Ok((g, ga))
    }
}

/// Stand-in blocks: `L11 = a`, `L12 = |b|`, `L21 = L22 = mu` and
/// `L_V = (1 - eta a)^2 a` for a single type.
pub struct StandInBlocks<'a> {
    pub game: &'a QuadraticStandIn,
    pub type_id: u32,
}

impl BlockGradients for StandInBlocks<'_> {
    fn block_gradient(
        &self,
        block: LipschitzBlock,
        theta: &[f64],
        phi: &[f64],
        _stream: SeedStream,
    ) -> Result<Vec<f64>> {
        match block {
            LipschitzBlock::L11 | LipschitzBlock::L12 => {
                self.game.defender_gradient(self.type_id, theta, phi)
            }
            LipschitzBlock::L21 | LipschitzBlock::L22 => Ok(self.game.attacker_gradient(theta, phi)),
            LipschitzBlock::LV => self.game.meta_gradient(self.type_id, theta, phi),
        }
    }
}

impl QuadraticStandIn {
    pub fn blocks(&self, type_id: u32) -> StandInBlocks<'_> {
        StandInBlocks { game: self, type_id }
    }
}

pub struct StandInAttacker<'a> {
    game: &'a QuadraticStandIn,
    theta: Vec<f64>,
}

impl Objective for StandInAttacker<'_> {
    fn value(&self, x: &[f64], _stream: SeedStream) -> Result<f64> {
        Ok(self.game.attacker_value(&self.theta, x))
    }

    fn gradient(&self, x: &[f64], _stream: SeedStream) -> Result<Vec<f64>> {
        Ok(self.game.attacker_gradient(&self.theta, x))
    }
}
