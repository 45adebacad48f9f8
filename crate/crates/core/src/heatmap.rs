//! Learned conditional density `P(.|s,a)` evaluated on a regular 2-d grid.

use std::io::Write;

use crate::lowrank::{LowRankModel, Normalizer};
use crate::mdp::dot;
use crate::spaces::{Point, Space};
use crate::{Error, Result, Rng};

/// Monte-Carlo normalizer size used for heatmaps.
pub const HEATMAP_MC: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// `sum(values) * cell_area == 1`.
    Density,
    Raw,
}

/// Cell-centred values over `[low, high]`, row-major with `y` outer.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapGrid {
    pub nx: usize,
    pub ny: usize,
    pub low: [f64; 2],
    pub high: [f64; 2],
    pub values: Vec<f64>,
    pub normalization: Normalization,
}

impl HeatmapGrid {
    /// Evaluates `f` at every cell centre.
    pub fn from_fn<F>(nx: usize, ny: usize, low: [f64; 2], high: [f64; 2], mut f: F) -> Result<Self>
    where
        F: FnMut([f64; 2]) -> Result<f64>,
    {
        if nx == 0 || ny == 0 {
            return Err(Error::invalid("heatmap resolution must be positive"));
        }
        if !(low[0] < high[0] && low[1] < high[1]) {
            return Err(Error::invalid("heatmap bounds must be nonempty"));
        }
        let mut g = HeatmapGrid { nx, ny, low, high, values: Vec::with_capacity(nx * ny), normalization: Normalization::Raw };
        for iy in 0..ny {
            for ix in 0..nx {
                let v = f(g.cell_center(ix, iy))?;
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::NonFinite(format!("heatmap value at cell ({ix},{iy})")));
                }
                g.values.push(v);
            }
        }
        Ok(g)
    }

    pub fn cell_size(&self) -> [f64; 2] {
        [(self.high[0] - self.low[0]) / self.nx as f64, (self.high[1] - self.low[1]) / self.ny as f64]
    }

    pub fn cell_area(&self) -> f64 {
        let c = self.cell_size();
        c[0] * c[1]
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> [f64; 2] {
        let c = self.cell_size();
        [self.low[0] + (ix as f64 + 0.5) * c[0], self.low[1] + (iy as f64 + 0.5) * c[1]]
    }

    /// Cell containing `p`, clamped to the grid.
    pub fn cell_of(&self, p: [f64; 2]) -> (usize, usize) {
        let c = self.cell_size();
        let ix = ((p[0] - self.low[0]) / c[0]).floor().clamp(0.0, (self.nx - 1) as f64) as usize;
        let iy = ((p[1] - self.low[1]) / c[1]).floor().clamp(0.0, (self.ny - 1) as f64) as usize;
        (ix, iy)
    }

    pub fn value(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.nx + ix]
    }

    /// `sum(values) * cell_area`
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_area()
    }

    /// Largest cell, first in row-major order on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best % self.nx, best / self.nx)
    }

    /// Rescales so the grid integrates to one.
    pub fn normalize_density(&mut self) -> Result<()> {
        let m = self.mass();
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::NonFinite("heatmap mass".into()));
        }
        self.values.iter_mut().for_each(|v| *v /= m);
        self.normalization = Normalization::Density;
        Ok(())
    }

    /// `x,y,value` per cell with a header row.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "x,y,value")?;
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                let c = self.cell_center(ix, iy);
                writeln!(out, "{:.16e},{:.16e},{:.16e}", c[0], c[1], self.value(ix, iy))?;
            }
        }
        Ok(())
    }

    /// `key = value` sidecar describing the grid.
    pub fn metadata(&self) -> String {
        let norm = match self.normalization {
            Normalization::Density => "density",
            Normalization::Raw => "raw",
        };
        let (ax, ay) = self.argmax();
        format!(
            "nx = {}\nny = {}\nlow = [{:?}, {:?}]\nhigh = [{:?}, {:?}]\nnormalization = \"{norm}\"\nmass = {:?}\nargmax = [{ax}, {ay}]\n",
            self.nx,
            self.ny,
            self.low[0],
            self.low[1],
            self.high[0],
            self.high[1],
            self.mass()
        )
    }
}

/// Density-normalized heatmap of the learned `P(.|s,a)` over the model's
/// 2-d state box, with `log Z(s,a)` from `HEATMAP_MC` base-measure draws.
pub fn model_heatmap(model: &LowRankModel, s: &Point, a: &Point, resolution: (usize, usize), rng: &mut Rng) -> Result<HeatmapGrid> {
    let Space::Box { low, high } = &model.state_space else {
        return Err(Error::invalid("heatmap requires continuous state space"));
    };
    if low.len() != 2 {
        return Err(Error::invalid("heatmap requires a 2-d state space"));
    }
    let phi = model.phi(s, a)?;
    let log_z = model.log_partition(&phi, Normalizer::MonteCarlo(HEATMAP_MC), rng)?;
    let mut grid = HeatmapGrid::from_fn(resolution.0, resolution.1, [low[0], low[1]], [high[0], high[1]], |c| {
        let y = Point::Continuous(c.to_vec());
        let mu = model.mu(&y)?;
        let log_score = model.log_link(dot(&phi, &mu)) + model.base_measure.log_density(&y)?;
        Ok((log_score - log_z).exp())
    })?;
    grid.normalize_density()?;
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ContinuousMaze, RewardMode};
    use crate::lowrank::{BaseMeasure, LowRankConfig};
    use crate::rng;

    #[test]
    fn gaussian_grid_integrates_and_peaks_at_the_mean() {
        let maze = ContinuousMaze::four_rooms(RewardMode::Sparse);
        let s = [0.25, 0.25];
        let v = ContinuousMaze::grid_velocity(8);
        let mean = maze.mean_next(s, v);
        let sd = maze.noise_std;
        let low = [mean[0] - 6.0 * sd, mean[1] - 6.0 * sd];
        let high = [mean[0] + 6.0 * sd, mean[1] + 6.0 * sd];
        let g = HeatmapGrid::from_fn(100, 100, low, high, |c| maze.true_conditional_density(s, v, c)).unwrap();
        assert!((g.mass() - 1.0).abs() < 1e-2, "{}", g.mass());
        let (ix, iy) = g.argmax();
        let (mx, my) = g.cell_of(mean);
        assert!(ix.abs_diff(mx) <= 1 && iy.abs_diff(my) <= 1);
    }

    #[test]
    fn density_mode_integrates_to_one() {
        let mut g = HeatmapGrid::from_fn(7, 5, [0.0, -1.0], [2.0, 1.0], |c| Ok(c[0] + c[1] + 1.0)).unwrap();
        g.normalize_density().unwrap();
        assert!((g.mass() - 1.0).abs() < 1e-12);
        assert_eq!(g.normalization, Normalization::Density);
        let mut csv = vec![];
        g.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 36);
    }

    #[test]
    fn discrete_models_are_rejected() {
        let space = Space::discrete(4).unwrap();
        let cfg = LowRankConfig { feature_dim: 2, hidden: vec![3], ..LowRankConfig::default() };
        let m = LowRankModel::new(space.clone(), Space::discrete(2).unwrap(), BaseMeasure::uniform(&space), &cfg, &mut rng(1)).unwrap();
        let e = model_heatmap(&m, &Point::Discrete(0), &Point::Discrete(0), (4, 4), &mut rng(2)).unwrap_err();
        assert!(e.to_string().contains("heatmap requires continuous state space"));
    }

    #[test]
    fn learned_heatmap_is_normalized() {
        let maze = ContinuousMaze::four_rooms(RewardMode::Sparse);
        let space = crate::mdp::Environment::state_space(&maze).clone();
        let cfg = LowRankConfig { feature_dim: 4, hidden: vec![8], ..LowRankConfig::default() };
        let m = LowRankModel::new(space.clone(), Space::discrete(9).unwrap(), BaseMeasure::uniform(&space), &cfg, &mut rng(1)).unwrap();
        let g = model_heatmap(&m, &Point::Continuous(vec![0.2, 0.2]), &Point::Discrete(4), (20, 20), &mut rng(2)).unwrap();
        assert!((g.mass() - 1.0).abs() < 1e-6);
    }
}
