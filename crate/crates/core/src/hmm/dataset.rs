//! Displacement datasets and their CSV form (`seq,t,dx,dy,true_state`).

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::hmm::ball::{simulate_ball, BallSettings};
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub displacements: Vec<[f64; 2]>,
    /// Ground-truth heading per step; used only for evaluation.
    pub states: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn all_displacements(&self) -> impl Iterator<Item = &[f64; 2]> {
        self.sequences.iter().flat_map(|s| s.displacements.iter())
    }

    /// Root-mean-square displacement component.
    pub fn displacement_rms(&self) -> f64 {
        let (mut acc, mut n) = (0.0, 0usize);
        for d in self.all_displacements() {
            acc += d[0] * d[0] + d[1] * d[1];
            n += 2;
        }
        if n == 0 {
            0.0
        } else {
            (acc / n as f64).sqrt()
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("seq,t,dx,dy,true_state\n");
        for (i, s) in self.sequences.iter().enumerate() {
            for (t, (d, z)) in s.displacements.iter().zip(&s.states).enumerate() {
                writeln!(out, "{i},{t},{:?},{:?},{z}", d[0], d[1]).expect("write to string");
            }
        }
        out
    }

    /// Parses the CSV form. Leading `#` comment lines are skipped. Sequences
    /// must appear in order with consecutive time indices; `n_sequences`
    /// restores trailing empty sequences.
    pub fn from_csv(text: &str, n_sequences: Option<usize>) -> Result<Dataset> {
        let mut lines = text.lines().skip_while(|l| l.starts_with('#'));
        let skipped = text.lines().take_while(|l| l.starts_with('#')).count();
        let header = lines.next().unwrap_or_default();
        if header.trim() != "seq,t,dx,dy,true_state" {
            return Err(Error::InvalidValue(format!("unexpected CSV header {header:?}")));
        }
        let mut sequences: Vec<Sequence> = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::InvalidValue(format!("line {}: {what}", lineno + skipped + 2));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 {
                return Err(bad("expected 5 columns"));
            }
            let seq: usize = cols[0].trim().parse().map_err(|_| bad("seq"))?;
            let t: usize = cols[1].trim().parse().map_err(|_| bad("t"))?;
            let dx: f64 = cols[2].trim().parse().map_err(|_| bad("dx"))?;
            let dy: f64 = cols[3].trim().parse().map_err(|_| bad("dy"))?;
            let z: usize = cols[4].trim().parse().map_err(|_| bad("true_state"))?;
            while sequences.len() <= seq {
                sequences.push(Sequence {
                    displacements: Vec::new(),
                    states: Vec::new(),
                });
            }
            let s = &mut sequences[seq];
            if s.displacements.len() != t {
                return Err(bad("time index out of order"));
            }
            s.displacements.push([dx, dy]);
            s.states.push(z);
        }
        if let Some(n) = n_sequences {
            while sequences.len() < n {
                sequences.push(Sequence {
                    displacements: Vec::new(),
                    states: Vec::new(),
                });
            }
        }
        Ok(Dataset { sequences })
    }
}

/// `n` independent trajectories of `steps` moves. Sequence `i` uses
/// `RngStream::new(seed).substream(i)`; start position and heading are
/// uniform.
pub fn generate_dataset(
    n: usize,
    steps: usize,
    settings: &BallSettings,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Shape("need at least one sequence".into()));
    }
    let root = RngStream::new(seed);
    let mut sequences = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = root.substream(i as u64);
        let l = settings.box_size;
        let start = [rng.uniform() * l, rng.uniform() * l];
        let heading = ((rng.uniform() * settings.n_headings as f64) as usize)
            .min(settings.n_headings.saturating_sub(1));
        let tr = simulate_ball(settings, start, heading, steps, &mut rng)?;
        sequences.push(Sequence {
            displacements: tr.displacements,
            states: tr.headings,
        });
    }
    Ok(Dataset { sequences })
}
