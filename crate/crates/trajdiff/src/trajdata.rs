//! Trajectory data ingestion: annotation-file parsing, fixed-length
//! observation/prediction windowing, coordinate normalization, and synthetic
//! dataset generation for desk-scale experiments.
//!
//! The canonical windowing protocol is 8 observed + 12 future positions at
//! 0.4 s per frame; both lengths are parameters where it matters.
//!
//! Randomness is drawn from [`rand_chacha::ChaCha8Rng`] seeded with
//! `seed_from_u64`, one stream per generated trajectory, so synthetic datasets
//! are byte-for-byte reproducible across runs and platforms.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;

/// Observed positions per window under the standard protocol.
pub const DEFAULT_T_OBS: usize = 8;
/// Future positions per window under the standard protocol.
pub const DEFAULT_T_FUT: usize = 12;
/// Seconds between consecutive positions (2.5 Hz).
pub const DEFAULT_FRAME_STEP: f64 = 0.4;

/// One annotation row: a pedestrian position at a frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawRecord {
    pub frame_id: u64,
    pub ped_id: u64,
    pub x: f64,
    pub y: f64,
}

/// All records of one pedestrian, sorted by frame id.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub ped_id: u64,
    pub records: Vec<RawRecord>,
}

/// A parsed scene: per-pedestrian tracks plus the real-time frame step.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    tracks: Vec<Track>,
    frame_step: f64,
}

impl Scene {
    pub fn new(tracks: Vec<Track>, frame_step: f64) -> Result<Self> {
        if frame_step <= 0.0 || !frame_step.is_finite() {
            return Err(Error::validation("frame_step must be positive and finite"));
        }
        for t in &tracks {
            for pair in t.records.windows(2) {
                if pair[1].frame_id <= pair[0].frame_id {
                    return Err(Error::validation(format!(
                        "pedestrian {} has non-increasing frame ids",
                        t.ped_id
                    )));
                }
            }
        }
        Ok(Scene { tracks, frame_step })
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn frame_step(&self) -> f64 {
        self.frame_step
    }

    pub fn num_records(&self) -> usize {
        self.tracks.iter().map(|t| t.records.len()).sum()
    }

    /// Detects the common frame-id increment: the most frequent difference
    /// between consecutive records of a pedestrian, smallest on ties.
    /// Non-conforming increments are treated as gaps when windowing.
    pub fn detect_frame_stride(&self) -> Option<u64> {
        let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
        for t in &self.tracks {
            for pair in t.records.windows(2) {
                *counts.entry(pair[1].frame_id - pair[0].frame_id).or_insert(0) += 1;
            }
        }
        counts
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(diff, _)| diff)
    }
}

/// One training/evaluation sample: observed past, future ground truth, and
/// the world offset removed by normalization.
///
/// Windows come out of [`build_windows`] un-normalized with `origin == (0,0)`;
/// [`normalize`] translates the last observed position to the origin and
/// records the shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryWindow {
    pub ped_id: u64,
    pub origin: [f64; 2],
    pub obs: Vec<[f64; 2]>,
    pub fut: Vec<[f64; 2]>,
}

impl TrajectoryWindow {
    pub fn new(ped_id: u64, origin: [f64; 2], obs: Vec<[f64; 2]>, fut: Vec<[f64; 2]>) -> Result<Self> {
        if obs.is_empty() || fut.is_empty() {
            return Err(Error::validation("window segments must be non-empty"));
        }
        let w = TrajectoryWindow {
            ped_id,
            origin,
            obs,
            fut,
        };
        w.check_finite()?;
        Ok(w)
    }

    pub fn check_finite(&self) -> Result<()> {
        let all = self
            .obs
            .iter()
            .chain(self.fut.iter())
            .chain(std::iter::once(&self.origin));
        for p in all {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(Error::NonFinite("trajectory window".into()));
            }
        }
        Ok(())
    }

    /// Last observed position, the normalization anchor.
    pub fn last_obs(&self) -> [f64; 2] {
        *self.obs.last().expect("non-empty obs")
    }
}

/// Parses a whitespace-separated annotation stream.
///
/// Each non-empty, non-`#` line must start with four numeric fields read as
/// `frame_id ped_id x y`; extra fields are ignored. Lines may end in LF or
/// CRLF. Records are grouped per pedestrian and sorted by frame id; a repeated
/// `(frame_id, ped_id)` pair is rejected.
pub fn parse_scene_file<R: BufRead>(reader: R, frame_step: f64) -> Result<Scene> {
    let mut by_ped: BTreeMap<u64, Vec<RawRecord>> = BTreeMap::new();
    let mut seen: HashSet<(u64, u64)> = HashSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(format!("line {line_no}"), e))?;
        let line = line.trim_end_matches('\r');
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() < 4 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected at least 4 fields, got {}", fields.len()),
            });
        }
        let nums: Vec<f64> = fields[..4]
            .iter()
            .enumerate()
            .map(|(i, f)| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        line: line_no,
                        msg: format!("field {} ({f:?}) is not a finite number", i + 1),
                    })
            })
            .collect::<Result<_>>()?;
        let as_id = |v: f64, name: &str| -> Result<u64> {
            if v < 0.0 || v.fract() != 0.0 || v > u64::MAX as f64 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("{name} must be a non-negative integer, got {v}"),
                });
            }
            Ok(v as u64)
        };
        let rec = RawRecord {
            frame_id: as_id(nums[0], "frame_id")?,
            ped_id: as_id(nums[1], "ped_id")?,
            x: nums[2],
            y: nums[3],
        };
        if !seen.insert((rec.frame_id, rec.ped_id)) {
            return Err(Error::validation(format!(
                "duplicate observation for pedestrian {} at frame {} (line {line_no})",
                rec.ped_id, rec.frame_id
            )));
        }
        by_ped.entry(rec.ped_id).or_default().push(rec);
    }

    let tracks = by_ped
        .into_iter()
        .map(|(ped_id, mut records)| {
            records.sort_by_key(|r| r.frame_id);
            Track { ped_id, records }
        })
        .collect();
    Scene::new(tracks, frame_step)
}

/// Slices each track into windows of `t_obs + t_fut` consecutive frames,
/// one window per `stride` offset. A window is emitted only when every
/// consecutive frame-id difference inside it equals the scene's detected
/// frame stride; positions are copied verbatim (`origin == (0,0)`).
pub fn build_windows(
    scene: &Scene,
    t_obs: usize,
    t_fut: usize,
    stride: usize,
) -> Result<Vec<TrajectoryWindow>> {
    if t_obs < 1 || t_fut < 1 || stride < 1 {
        return Err(Error::validation("t_obs, t_fut and stride must all be >= 1"));
    }
    let total = t_obs + t_fut;
    let frame_stride = match scene.detect_frame_stride() {
        Some(d) => d,
        None => return Ok(Vec::new()),
    };

    let mut windows = Vec::new();
    for track in scene.tracks() {
        let recs = &track.records;
        if recs.len() < total {
            continue;
        }
        let consecutive: Vec<bool> = recs
            .windows(2)
            .map(|p| p[1].frame_id - p[0].frame_id == frame_stride)
            .collect();
        for start in (0..=recs.len() - total).step_by(stride) {
            if !consecutive[start..start + total - 1].iter().all(|&c| c) {
                continue;
            }
            let pos = |r: &RawRecord| [r.x, r.y];
            let obs = recs[start..start + t_obs].iter().map(pos).collect();
            let fut = recs[start + t_obs..start + total].iter().map(pos).collect();
            windows.push(TrajectoryWindow::new(track.ped_id, [0.0, 0.0], obs, fut)?);
        }
    }
    Ok(windows)
}

/// Translates the window so the last observed position lands at `(0,0)`,
/// accumulating the shift into `origin`. Inverse of [`denormalize`].
pub fn normalize(window: &TrajectoryWindow) -> TrajectoryWindow {
    let [sx, sy] = window.last_obs();
    let shift = |p: &[f64; 2]| [p[0] - sx, p[1] - sy];
    TrajectoryWindow {
        ped_id: window.ped_id,
        origin: [window.origin[0] + sx, window.origin[1] + sy],
        obs: window.obs.iter().map(shift).collect(),
        fut: window.fut.iter().map(shift).collect(),
    }
}

/// Adds `origin` back onto every position and clears it.
pub fn denormalize(window: &TrajectoryWindow) -> TrajectoryWindow {
    let [ox, oy] = window.origin;
    let shift = |p: &[f64; 2]| [p[0] + ox, p[1] + oy];
    TrajectoryWindow {
        ped_id: window.ped_id,
        origin: [0.0, 0.0],
        obs: window.obs.iter().map(shift).collect(),
        fut: window.fut.iter().map(shift).collect(),
    }
}

/// Applies a window's origin to externally produced future positions.
pub fn denormalize_positions(positions: &[[f64; 2]], origin: [f64; 2]) -> Vec<[f64; 2]> {
    positions
        .iter()
        .map(|p| [p[0] + origin[0], p[1] + origin[1]])
        .collect()
}

/// Recipe for a synthetic turn-mixture dataset.
///
/// Each trajectory walks 8 steps at `speed` along a random heading, then for
/// 12 steps keeps the heading, turns left, or turns right at `turn_rate` per
/// step according to `turn_probabilities` (left, straight, right). Gaussian
/// position noise of standard deviation `noise_std` is added throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub count: usize,
    /// Walking speed in m/s; converted to per-step displacement at 0.4 s.
    pub speed: f64,
    pub turn_probabilities: (f64, f64, f64),
    /// Heading change per future step, radians.
    pub turn_rate: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::validation("count must be positive"));
        }
        let (l, s, r) = self.turn_probabilities;
        if l < 0.0 || s < 0.0 || r < 0.0 || (l + s + r - 1.0).abs() > 1e-9 {
            return Err(Error::validation(
                "turn probabilities must be non-negative and sum to 1",
            ));
        }
        if !(self.speed.is_finite() && self.speed >= 0.0) {
            return Err(Error::validation("speed must be finite and non-negative"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::validation("noise_std must be finite and non-negative"));
        }
        if !self.turn_rate.is_finite() {
            return Err(Error::validation("turn_rate must be finite"));
        }
        Ok(())
    }
}

/// Generates `spec.count` normalized windows, deterministic in `spec.seed`.
///
/// Trajectory `i` draws from ChaCha8 stream `i` of the seed, so the output is
/// independent of generation order.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<TrajectoryWindow>> {
    spec.validate()?;
    let step_len = spec.speed * DEFAULT_FRAME_STEP;
    let (p_left, p_straight, _) = spec.turn_probabilities;

    let mut windows = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);

        let heading: f64 = rng.random::<f64>() * std::f64::consts::TAU;
        let u: f64 = rng.random();
        let turn = if u < p_left {
            spec.turn_rate
        } else if u < p_left + p_straight {
            0.0
        } else {
            -spec.turn_rate
        };

        let mut pos = [0.0f64, 0.0f64];
        let mut dir = heading;
        let mut obs = Vec::with_capacity(DEFAULT_T_OBS);
        obs.push(pos);
        for _ in 1..DEFAULT_T_OBS {
            pos = [pos[0] + step_len * dir.cos(), pos[1] + step_len * dir.sin()];
            obs.push(pos);
        }
        let mut fut = Vec::with_capacity(DEFAULT_T_FUT);
        for _ in 0..DEFAULT_T_FUT {
            dir += turn;
            pos = [pos[0] + step_len * dir.cos(), pos[1] + step_len * dir.sin()];
            fut.push(pos);
        }

        let mut jitter = |p: &mut [f64; 2]| {
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            p[0] += spec.noise_std * nx;
            p[1] += spec.noise_std * ny;
        };
        for p in obs.iter_mut().chain(fut.iter_mut()) {
            jitter(p);
        }

        let window = TrajectoryWindow::new(i as u64, [0.0, 0.0], obs, fut)?;
        windows.push(normalize(&window));
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn parse(text: &str) -> Result<Scene> {
        parse_scene_file(Cursor::new(text), DEFAULT_FRAME_STEP)
    }

    #[test]
    fn parses_minimal_scene() {
        let scene = parse("0 1 2.0 3.0\n10 1 2.4 3.0").unwrap();
        assert_eq!(scene.tracks().len(), 1);
        assert_eq!(scene.tracks()[0].records.len(), 2);
        assert_eq!(scene.tracks()[0].records[1].x, 2.4);
    }

    #[test]
    fn empty_input_gives_empty_scene() {
        let scene = parse("").unwrap();
        assert!(scene.tracks().is_empty());
        assert_eq!(scene.num_records(), 0);
    }

    #[test]
    fn reports_parse_error_with_line_number() {
        let err = parse("0 1 abc 3.0").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other}"),
        }
        let err = parse("0 1 2.0 3.0\n10 1").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn rejects_duplicate_observation() {
        let err = parse("0 1 2.0 3.0\n0 1 9.9 9.9").unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn skips_comments_and_crlf() {
        let scene = parse("# header\r\n0 1 2.0 3.0\r\n\r\n10 1 2.4 3.0 extra ignored\r\n").unwrap();
        assert_eq!(scene.num_records(), 2);
    }

    #[test]
    fn rejects_fractional_ids() {
        assert!(parse("0.5 1 2.0 3.0").is_err());
        assert!(parse("0 -1 2.0 3.0").is_err());
    }

    fn straight_scene(frames: usize, frame_stride: u64) -> Scene {
        let records = (0..frames)
            .map(|i| RawRecord {
                frame_id: i as u64 * frame_stride,
                ped_id: 1,
                x: i as f64 * 0.4,
                y: 0.0,
            })
            .collect();
        Scene::new(
            vec![Track {
                ped_id: 1,
                records,
            }],
            DEFAULT_FRAME_STEP,
        )
        .unwrap()
    }

    #[test]
    fn window_counts_at_boundaries() {
        assert_eq!(build_windows(&straight_scene(20, 10), 8, 12, 1).unwrap().len(), 1);
        assert_eq!(build_windows(&straight_scene(21, 10), 8, 12, 1).unwrap().len(), 2);
        assert_eq!(build_windows(&straight_scene(19, 10), 8, 12, 1).unwrap().len(), 0);
    }

    #[test]
    fn windows_skip_frame_gaps() {
        let mut records: Vec<RawRecord> = (0..25)
            .map(|i| RawRecord {
                frame_id: i * 10,
                ped_id: 1,
                x: i as f64,
                y: 0.0,
            })
            .collect();
        // Remove one frame in the middle; windows crossing it must vanish.
        records.remove(12);
        let scene = Scene::new(vec![Track { ped_id: 1, records }], DEFAULT_FRAME_STEP).unwrap();
        let wins = build_windows(&scene, 8, 12, 1).unwrap();
        // 24 records: runs of 12 and 12 consecutive frames, both too short.
        assert!(wins.is_empty());
    }

    #[test]
    fn window_positions_are_verbatim() {
        let wins = build_windows(&straight_scene(20, 10), 8, 12, 1).unwrap();
        let w = &wins[0];
        assert_eq!(w.origin, [0.0, 0.0]);
        assert_eq!(w.obs.len(), 8);
        assert_eq!(w.fut.len(), 12);
        assert_eq!(w.obs[3], [1.2000000000000002, 0.0]);
        assert_eq!(w.fut[11], [7.6000000000000005, 0.0]);
    }

    #[test]
    fn stride_detection_prefers_mode() {
        // One gap of 20 among strides of 10.
        let mut records: Vec<RawRecord> = (0..10)
            .map(|i| RawRecord {
                frame_id: i * 10,
                ped_id: 1,
                x: 0.0,
                y: 0.0,
            })
            .collect();
        records.push(RawRecord {
            frame_id: 110,
            ped_id: 1,
            x: 0.0,
            y: 0.0,
        });
        let scene = Scene::new(vec![Track { ped_id: 1, records }], DEFAULT_FRAME_STEP).unwrap();
        assert_eq!(scene.detect_frame_stride(), Some(10));
    }

    #[test]
    fn normalize_moves_last_obs_to_origin() {
        let obs = vec![[1.0, 2.0], [5.0, 7.0]];
        let fut = vec![[6.0, 8.0]];
        let w = TrajectoryWindow::new(1, [0.0, 0.0], obs, fut).unwrap();
        let n = normalize(&w);
        assert_eq!(n.origin, [5.0, 7.0]);
        assert_eq!(n.obs[1], [0.0, 0.0]);
        assert_eq!(n.obs[0], [-4.0, -5.0]);
        assert_eq!(n.fut[0], [1.0, 1.0]);
        let back = denormalize(&n);
        assert_eq!(back, w);
    }

    #[test]
    fn normalize_is_identity_when_centered() {
        let w = TrajectoryWindow::new(1, [0.0, 0.0], vec![[-1.0, 0.5], [0.0, 0.0]], vec![[1.0, 1.0]])
            .unwrap();
        let n = normalize(&w);
        assert_eq!(n, w);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec {
            count: 10,
            speed: 1.2,
            turn_probabilities: (0.3, 0.4, 0.3),
            turn_rate: 0.2,
            noise_std: 0.05,
            seed: 7,
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        for w in &a {
            assert_eq!(w.obs.len(), DEFAULT_T_OBS);
            assert_eq!(w.fut.len(), DEFAULT_T_FUT);
            assert_eq!(w.last_obs(), [0.0, 0.0]);
        }
    }

    #[test]
    fn straight_futures_stay_collinear() {
        let spec = SyntheticSpec {
            count: 20,
            speed: 1.0,
            turn_probabilities: (0.0, 1.0, 0.0),
            turn_rate: 0.3,
            noise_std: 0.0,
            seed: 3,
        };
        for w in generate_synthetic(&spec).unwrap() {
            let a = w.obs[0];
            let b = w.last_obs();
            let d = [b[0] - a[0], b[1] - a[1]];
            for p in &w.fut {
                let cross = (p[0] - b[0]) * d[1] - (p[1] - b[1]) * d[0];
                assert!(cross.abs() < 1e-9, "future point off the heading line: {cross}");
            }
        }
    }

    #[test]
    fn synthetic_validates_probabilities() {
        let bad = SyntheticSpec {
            count: 1,
            speed: 1.0,
            turn_probabilities: (0.5, 0.2, 0.2),
            turn_rate: 0.1,
            noise_std: 0.0,
            seed: 0,
        };
        assert!(generate_synthetic(&bad).is_err());
    }

    #[test]
    fn window_json_shape() {
        let w = TrajectoryWindow::new(3, [1.0, 2.0], vec![[0.5, -0.5]], vec![[1.5, 2.5]]).unwrap();
        let json = serde_json::to_string(&w).unwrap();
        assert_eq!(
            json,
            r#"{"ped_id":3,"origin":[1.0,2.0],"obs":[[0.5,-0.5]],"fut":[[1.5,2.5]]}"#
        );
        let back: TrajectoryWindow = serde_json::from_str(&json).unwrap();
        assert_eq!(back, w);
    }
}
