//! Trajectory CSV format.
//!
//! ```text
//! # scenario=appendix_b
//! unit_index,w,a,y,g_prob,design_kind,design_params
//! 1,1.2345678901234567e0,1,...,constant,5.0000000000000000e-1
//! ```
//!
//! Reals are written with 17 significant digits so reading a file back
//! reproduces every value bit for bit. `design_params` is the
//! semicolon-joined parameter record of [`DesignFunction::params`].

use std::io::{BufRead, Write};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::trial::{DesignFunction, GbarStep, Observation, Trajectory};

pub const TRAJECTORY_HEADER: &str = "unit_index,w,a,y,g_prob,design_kind,design_params";

/// Format a real with 17 significant digits.
pub fn fmt_real<T: Real>(x: T) -> String {
    format!("{x:.16e}")
}

pub fn write_trajectory<T: Real, W: Write>(traj: &Trajectory<T>, mut out: W) -> Result<()> {
    writeln!(out, "# scenario={}", traj.scenario_meta())?;
    writeln!(out, "{TRAJECTORY_HEADER}")?;
    for (i, (o, d)) in traj.observations().iter().zip(traj.designs()).enumerate() {
        let params: Vec<String> = d.params().into_iter().map(fmt_real).collect();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            i + 1,
            fmt_real(o.w),
            o.a,
            fmt_real(o.y),
            fmt_real(o.g_prob),
            d.kind_label(),
            params.join(";")
        )?;
    }
    out.flush()?;
    Ok(())
}

fn parse_real<T: Real>(s: &str, line: usize, what: &str) -> Result<T> {
    s.trim().parse::<T>().map_err(|_| Error::Parse { line, msg: format!("bad {what} '{s}'") })
}

/// Read a trajectory and validate it (lengths, realized probabilities).
///
/// Consecutive rows carrying the same Neyman or benefit rule share one
/// in-memory rule, as they did when the trajectory was simulated.
pub fn read_trajectory<T: Real, R: BufRead>(input: R) -> Result<Trajectory<T>> {
    let mut meta = String::from("unknown");
    let mut header_seen = false;
    let mut obs = Vec::new();
    let mut designs: Vec<DesignFunction<T>> = Vec::new();
    let mut last_params: Option<(String, Vec<T>)> = None;
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('#') {
            if let Some(m) = rest.trim().strip_prefix("scenario=") {
                meta = m.to_string();
            }
            continue;
        }
        if !header_seen {
            if trimmed != TRAJECTORY_HEADER {
                return Err(Error::Parse { line: line_no, msg: format!("expected header '{TRAJECTORY_HEADER}'") });
            }
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Parse { line: line_no, msg: format!("expected 7 fields, found {}", fields.len()) });
        }
        let unit: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| Error::Parse { line: line_no, msg: format!("bad unit_index '{}'", fields[0]) })?;
        if unit != obs.len() + 1 {
            return Err(Error::Parse { line: line_no, msg: format!("unit_index {unit} out of sequence") });
        }
        let w: T = parse_real(fields[1], line_no, "w")?;
        let a: u8 = fields[2]
            .trim()
            .parse()
            .map_err(|_| Error::Parse { line: line_no, msg: format!("bad treatment '{}'", fields[2]) })?;
        let y: T = parse_real(fields[3], line_no, "y")?;
        let g: T = parse_real(fields[4], line_no, "g_prob")?;
        let kind = fields[5].trim();
        let params: Vec<T> = if fields[6].trim().is_empty() {
            Vec::new()
        } else {
            fields[6].split(';').map(|s| parse_real(s, line_no, "design parameter")).collect::<Result<_>>()?
        };
        let o = Observation::new(w, a, y, g).map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        let mut d = DesignFunction::from_params(kind, &params)
            .map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        d = share_with_previous(d, designs.last(), &last_params, kind, &params);
        last_params = Some((kind.to_string(), params));
        obs.push(o);
        designs.push(d);
    }
    if !header_seen {
        return Err(Error::Parse { line: 0, msg: "missing trajectory header".into() });
    }
    Trajectory::from_parts(obs, designs, meta)
}

fn share_with_previous<T: Real>(
    d: DesignFunction<T>,
    prev: Option<&DesignFunction<T>>,
    last: &Option<(String, Vec<T>)>,
    kind: &str,
    params: &[T],
) -> DesignFunction<T> {
    let (Some(prev), Some((last_kind, last_params))) = (prev, last) else {
        return d;
    };
    match (d, prev) {
        (DesignFunction::Neyman(_), DesignFunction::Neyman(p)) if last_kind == kind && last_params[..] == *params => {
            DesignFunction::Neyman(Arc::clone(p))
        }
        (DesignFunction::Benefit(_), DesignFunction::Benefit(p)) if last_kind == kind && last_params[..] == *params => {
            DesignFunction::Benefit(Arc::clone(p))
        }
        (DesignFunction::GbarDriven(s), DesignFunction::GbarDriven(p)) if *s.estimate == *p.estimate => {
            DesignFunction::GbarDriven(GbarStep { step: s.step, estimate: Arc::clone(&p.estimate) })
        }
        (d, _) => d,
    }
}
