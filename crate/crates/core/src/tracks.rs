//! Feature-track frames and the track CSV format.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::camera::{Lens, PixelPoint};
use crate::io::{self, DataError};

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("track stream gap of {gap:.3} s before t = {t:.6} s exceeds {limit:.3} s")]
    StreamGap { t: f64, gap: f64, limit: f64 },
    #[error("landmark {id} appears twice in lens {lens} at t = {t:.6} s")]
    DuplicateTrack { id: u64, lens: usize, t: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPoint {
    pub id: u64,
    pub pixel: PixelPoint,
    /// Number of frames this track has been followed in this lens.
    pub age: u32,
}

/// Track positions of one video frame, per lens, sorted by id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrackFrame {
    pub t: f64,
    pub lenses: [Vec<TrackPoint>; 2],
}

impl TrackFrame {
    pub fn new(t: f64) -> Self {
        Self {
            t,
            lenses: [Vec::new(), Vec::new()],
        }
    }

    pub fn lens(&self, lens: Lens) -> &[TrackPoint] {
        &self.lenses[lens.index()]
    }

    pub fn get(&self, lens: Lens, id: u64) -> Option<&TrackPoint> {
        let pts = self.lens(lens);
        pts.binary_search_by_key(&id, |p| p.id).ok().map(|i| &pts[i])
    }

    /// Ids present in both lenses, ascending.
    pub fn stereo_ids(&self) -> Vec<u64> {
        let (a, b) = (&self.lenses[0], &self.lenses[1]);
        let (mut i, mut j) = (0, 0);
        let mut out = Vec::new();
        while i < a.len() && j < b.len() {
            match a[i].id.cmp(&b[j].id) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    out.push(a[i].id);
                    i += 1;
                    j += 1;
                }
            }
        }
        out
    }

    pub fn mean_age(&self) -> f64 {
        let pts = &self.lenses[0];
        if pts.is_empty() {
            return 0.0;
        }
        pts.iter().map(|p| p.age as f64).sum::<f64>() / pts.len() as f64
    }

    fn sort(&mut self) {
        for l in &mut self.lenses {
            l.sort_by_key(|p| p.id);
        }
    }

    fn check_unique(&self) -> Result<(), TrackError> {
        for (lens, pts) in self.lenses.iter().enumerate() {
            if let Some(w) = pts.windows(2).find(|w| w[0].id == w[1].id) {
                return Err(TrackError::DuplicateTrack {
                    id: w[0].id,
                    lens,
                    t: self.t,
                });
            }
        }
        Ok(())
    }
}

pub const TRACK_HEADER: [&str; 5] = ["timestamp_s", "lens", "landmark_id", "u", "v"];

pub fn format_track_csv(frames: &[TrackFrame]) -> String {
    let rows = frames.iter().flat_map(|f| {
        Lens::BOTH.into_iter().flat_map(move |lens| {
            f.lens(lens)
                .iter()
                .map(move |p| [f.t, lens.index() as f64, p.id as f64, p.pixel.u, p.pixel.v])
        })
    });
    io::format_numeric(&TRACK_HEADER, rows)
}

/// Parses a track CSV into frames. Ages are reconstructed from consecutive
/// appearances of an id in the same lens. Frames are separated by distinct
/// timestamps; a gap larger than `max_gap` seconds is an error.
pub fn parse_track_csv(text: &str, max_gap: f64) -> Result<Vec<TrackFrame>, TrackError> {
    let rows = io::parse_numeric(text, &TRACK_HEADER)?;
    let mut frames: Vec<TrackFrame> = Vec::new();
    for row in rows {
        let v = &row.values;
        let lens = Lens::from_index(v[1] as usize)
            .filter(|_| v[1].fract() == 0.0)
            .ok_or_else(|| DataError::Invalid {
                row: row.line,
                message: format!("lens must be 0 or 1, got {}", v[1]),
            })?;
        if v[2] < 0.0 || v[2].fract() != 0.0 {
            return Err(DataError::Invalid {
                row: row.line,
                message: format!("landmark_id must be a non-negative integer, got {}", v[2]),
            }
            .into());
        }
        let t = v[0];
        match frames.last() {
            Some(f) if f.t == t => {}
            Some(f) if t < f.t => {
                return Err(DataError::Invalid {
                    row: row.line,
                    message: format!("timestamp {t} goes backwards"),
                }
                .into())
            }
            Some(f) if t - f.t > max_gap => {
                return Err(TrackError::StreamGap {
                    t,
                    gap: t - f.t,
                    limit: max_gap,
                })
            }
            _ => frames.push(TrackFrame::new(t)),
        }
        let frame = frames.last_mut().expect("pushed above");
        frame.lenses[lens.index()].push(TrackPoint {
            id: v[2] as u64,
            pixel: PixelPoint::new(v[3], v[4]),
            age: 0,
        });
    }
    let mut last_age: [BTreeMap<u64, u32>; 2] = Default::default();
    for frame in &mut frames {
        frame.sort();
        frame.check_unique()?;
        for (lens, pts) in frame.lenses.iter_mut().enumerate() {
            let mut next = BTreeMap::new();
            for p in pts.iter_mut() {
                p.age = last_age[lens].get(&p.id).map_or(0, |a| a + 1);
                next.insert(p.id, p.age);
            }
            last_age[lens] = next;
        }
    }
    Ok(frames)
}
