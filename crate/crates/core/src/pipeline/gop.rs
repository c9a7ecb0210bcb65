//! Group-of-pictures planning: which frame is coded how, against which
//! references, in which order.
//!
//! Reference frames sit on a grid with spacing `n + 1`; grid frames at
//! multiples of the GoP size are intra, the rest are forward-predicted from
//! the previous grid frame. Every complete gap between consecutive grid
//! frames is filled with a binary hierarchy of bidirectional frames, so a
//! gap near the end of a GoP legally references the next GoP's intra frame.
//! Frames after the last grid frame cannot see a future reference and fall
//! back to a chain of forward predictions.
//!
//! The GoP size must be a multiple of the reference spacing as soon as the
//! sequence spans more than one GoP, so that every intra frame lands on the
//! grid. A single-GoP sequence has no such constraint: its only intra frame
//! is frame 0.
//!
//! Coding order is all reference frames in display order, then the
//! bidirectional frames sorted by hierarchy level and display index. Every
//! frame's references are coded before it by construction.

use crate::error::{Error, Result};

/// How a frame is coded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodingType {
    /// Intra: no references.
    I,
    /// Forward predicted from one earlier reconstruction.
    P,
    /// Bidirectional: interpolated from two reconstructions.
    B,
}

/// One frame's slot in the plan.
#[derive(Clone, Copy, Debug)]
pub struct FramePlan {
    pub display: usize,
    pub ctype: CodingType,
    /// Earlier reference (P and B).
    pub prev_ref: Option<usize>,
    /// Later reference (B only).
    pub next_ref: Option<usize>,
    /// Hierarchy depth for B frames; 0 spans the widest gap.
    pub level: usize,
    /// GoP index: `display / gop_size`.
    pub gop: usize,
}

/// Complete plan, stored in coding order.
#[derive(Clone, Debug)]
pub struct GopPlan {
    pub frames: Vec<FramePlan>,
}

impl GopPlan {
    /// Display indices in coding order.
    pub fn coding_order(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.display).collect()
    }

    /// `(intra, forward, bidirectional)` frame counts.
    pub fn counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for f in &self.frames {
            match f.ctype {
                CodingType::I => c.0 += 1,
                CodingType::P => c.1 += 1,
                CodingType::B => c.2 += 1,
            }
        }
        c
    }
}

/// Build the plan for `num_frames` frames with intra period `gop_size` and
/// `n` bidirectional frames per gap. `n + 1` must be a power of two, and
/// must divide `gop_size` whenever the sequence holds more than one GoP.
pub fn plan_gop(num_frames: usize, gop_size: usize, n: usize) -> Result<GopPlan> {
    if num_frames == 0 {
        return Err(Error::InvalidArg("empty sequence".into()));
    }
    if n == 0 || !(n + 1).is_power_of_two() {
        return Err(Error::InvalidArg(format!(
            "bidirectional depth {n} invalid: n + 1 must be a power of two"
        )));
    }
    let step = n + 1;
    if gop_size == 0 {
        return Err(Error::InvalidArg("gop size must be positive".into()));
    }
    if num_frames > gop_size && gop_size % step != 0 {
        return Err(Error::InvalidArg(format!(
            "gop size {gop_size} not a multiple of reference spacing {step}"
        )));
    }

    let mut refs = Vec::new();
    let mut d = 0;
    while d < num_frames {
        let (ctype, prev) = if d % gop_size == 0 {
            (CodingType::I, None)
        } else {
            (CodingType::P, Some(d - step))
        };
        refs.push(FramePlan {
            display: d,
            ctype,
            prev_ref: prev,
            next_ref: None,
            level: 0,
            gop: d / gop_size,
        });
        d += step;
    }
    // Frames past the last grid reference see no future frame: chain them.
    let last_grid = refs.last().unwrap().display;
    for d in last_grid + 1..num_frames {
        refs.push(FramePlan {
            display: d,
            ctype: CodingType::P,
            prev_ref: Some(d - 1),
            next_ref: None,
            level: 0,
            gop: d / gop_size,
        });
    }

    let mut bs = Vec::new();
    let mut left = 0;
    while left + step < num_frames {
        fill_gap(&mut bs, left, left + step, 0, gop_size);
        left += step;
    }
    bs.sort_by_key(|f| (f.level, f.display));

    let mut frames = refs;
    frames.extend(bs);
    Ok(GopPlan { frames })
}

fn fill_gap(out: &mut Vec<FramePlan>, l: usize, r: usize, level: usize, gop_size: usize) {
    if r - l < 2 {
        return;
    }
    let mid = (l + r) / 2;
    out.push(FramePlan {
        display: mid,
        ctype: CodingType::B,
        prev_ref: Some(l),
        next_ref: Some(r),
        level,
        gop: mid / gop_size,
    });
    fill_gap(out, l, mid, level + 1, gop_size);
    fill_gap(out, mid, r, level + 1, gop_size);
}
