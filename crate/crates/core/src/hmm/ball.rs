//! Noisy piecewise-constant-velocity motion of a ball in a square box.

use serde::{Deserialize, Serialize};

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BallSettings {
    pub speed: f64,
    pub noise_sd: f64,
    /// Probability of keeping the current heading for one more step.
    pub persistence: f64,
    /// Side length of the box `[0, box_size]²`.
    pub box_size: f64,
    pub n_headings: usize,
    /// Angle of heading 0 in radians; headings are evenly spaced from it.
    pub heading_offset: f64,
}

impl Default for BallSettings {
    fn default() -> Self {
        BallSettings {
            speed: 0.05,
            noise_sd: 0.01,
            persistence: 0.9,
            box_size: 1.0,
            n_headings: 4,
            heading_offset: 0.0,
        }
    }
}

impl BallSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidGeometry(m.to_string()));
        if !(self.box_size.is_finite() && self.box_size > 0.0) {
            return bad("box size must be > 0");
        }
        if !(self.speed.is_finite() && self.speed >= 0.0 && self.speed < self.box_size) {
            return bad("speed must be non-negative and below the box size");
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return bad("noise_sd must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.persistence) {
            return bad("persistence must be in [0, 1]");
        }
        if self.n_headings == 0 {
            return bad("need at least one heading");
        }
        Ok(())
    }

    /// Unit vectors of the headings.
    pub fn directions(&self) -> Vec<[f64; 2]> {
        (0..self.n_headings)
            .map(|k| {
                let a = self.heading_offset
                    + 2.0 * std::f64::consts::PI * k as f64 / self.n_headings as f64;
                [clean(a.cos()), clean(a.sin())]
            })
            .collect()
    }

    /// Mean displacement of each heading.
    pub fn velocities(&self) -> Vec<[f64; 2]> {
        self.directions()
            .iter()
            .map(|d| [self.speed * d[0], self.speed * d[1]])
            .collect()
    }
}

// cos(π/2) is 6e-17, not 0; snap so axis-aligned headings reflect onto each other.
fn clean(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        0.0
    } else {
        x
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallTrajectory {
    /// `T + 1` positions inside the box.
    pub positions: Vec<[f64; 2]>,
    /// `displacements[t] = positions[t + 1] − positions[t]`.
    pub displacements: Vec<[f64; 2]>,
    /// Heading that generated displacement `t`.
    pub headings: Vec<usize>,
}

/// Simulates `steps` moves. Before each move the heading switches to a
/// uniformly chosen different heading with probability `1 − persistence`.
/// Each move adds `speed · direction` plus isotropic Gaussian noise; a wall
/// crossing is folded back (`x' = 2b − x`) and flips the heading's
/// corresponding component.
pub fn simulate_ball(
    settings: &BallSettings,
    start: [f64; 2],
    start_heading: usize,
    steps: usize,
    rng: &mut RngStream,
) -> Result<BallTrajectory> {
    settings.validate()?;
    let l = settings.box_size;
    if !start.iter().all(|x| (0.0..=l).contains(x)) {
        return Err(Error::InvalidGeometry("start outside the box".into()));
    }
    if start_heading >= settings.n_headings {
        return Err(Error::InvalidGeometry("start heading out of range".into()));
    }
    let dirs = settings.directions();
    let mut pos = start;
    let mut heading = start_heading;
    let mut positions = vec![pos];
    let mut displacements = Vec::with_capacity(steps);
    let mut headings = Vec::with_capacity(steps);
    for t in 0..steps {
        if t > 0 && settings.n_headings > 1 && rng.uniform() >= settings.persistence {
            let k = (rng.uniform() * (settings.n_headings - 1) as f64) as usize;
            let k = k.min(settings.n_headings - 2);
            heading = if k >= heading { k + 1 } else { k };
        }
        headings.push(heading);
        let mut dir = dirs[heading];
        let mut next = [0.0; 2];
        for c in 0..2 {
            let noise: f64 = if settings.noise_sd > 0.0 {
                let z: f64 = StandardNormal.sample(rng.rng());
                settings.noise_sd * z
            } else {
                0.0
            };
            let mut x = pos[c] + settings.speed * dir[c] + noise;
            if x > l {
                x = 2.0 * l - x;
                dir[c] = -dir[c];
            } else if x < 0.0 {
                x = -x;
                dir[c] = -dir[c];
            }
            if !(0.0..=l).contains(&x) {
                return Err(Error::InvalidGeometry("step overshoots the box twice".into()));
            }
            next[c] = x;
        }
        if dir != dirs[heading] {
            heading = nearest_heading(&dirs, dir);
        }
        displacements.push([next[0] - pos[0], next[1] - pos[1]]);
        positions.push(next);
        pos = next;
    }
    Ok(BallTrajectory {
        positions,
        displacements,
        headings,
    })
}

fn nearest_heading(dirs: &[[f64; 2]], d: [f64; 2]) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (k, h) in dirs.iter().enumerate() {
        let dist = (h[0] - d[0]).powi(2) + (h[1] - d[1]).powi(2);
        if dist < best_dist {
            best = k;
            best_dist = dist;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn still(speed: f64) -> BallSettings {
        BallSettings {
            speed,
            noise_sd: 0.0,
            persistence: 1.0,
            ..BallSettings::default()
        }
    }

    #[test]
    fn straight_line_kinematics() {
        let mut rng = RngStream::new(0);
        let tr = simulate_ball(&still(0.1), [0.5, 0.5], 0, 3, &mut rng).unwrap();
        let xs: Vec<f64> = tr.positions[1..].iter().map(|p| p[0]).collect();
        for (x, want) in xs.iter().zip([0.6, 0.7, 0.8]) {
            assert!((x - want).abs() < 1e-12, "{xs:?}");
        }
        assert!(tr.positions.iter().all(|p| (p[1] - 0.5).abs() < 1e-15));
    }

    #[test]
    fn wall_reflection_folds_and_flips() {
        let mut rng = RngStream::new(0);
        let tr = simulate_ball(&still(0.1), [0.95, 0.5], 0, 2, &mut rng).unwrap();
        assert!((tr.positions[1][0] - 0.95).abs() < 1e-12);
        assert_eq!(tr.headings[1], 2, "heading after the bounce points in -x");
        assert!((tr.positions[2][0] - 0.85).abs() < 1e-12);
    }

    #[test]
    fn displacements_are_position_differences() {
        let mut rng = RngStream::new(3);
        let tr = simulate_ball(&BallSettings::default(), [0.3, 0.7], 1, 500, &mut rng).unwrap();
        for (t, d) in tr.displacements.iter().enumerate() {
            assert_eq!(d[0], tr.positions[t + 1][0] - tr.positions[t][0]);
            assert_eq!(d[1], tr.positions[t + 1][1] - tr.positions[t][1]);
        }
        assert!(tr.positions.iter().flatten().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn rejects_speed_beyond_box() {
        let mut rng = RngStream::new(0);
        let s = BallSettings {
            speed: 1.5,
            ..BallSettings::default()
        };
        assert!(matches!(
            simulate_ball(&s, [0.5, 0.5], 0, 1, &mut rng),
            Err(Error::InvalidGeometry(_))
        ));
    }
}
