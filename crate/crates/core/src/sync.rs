//! Trigger-gesture detection in MoCap marker tracks and nearest-frame
//! alignment of low-rate sensor frames to the MoCap clock.

use std::io::Read;

use serde::Deserialize;
use thiserror::Error;

use crate::geometry::Vec3;

pub const DEFAULT_MOCAP_RATE: f64 = 100.0;
pub const DEFAULT_SENSOR_RATE: f64 = 12.0;
pub const DEFAULT_TRIGGER_THRESHOLD: f64 = 0.10;

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no sample moved more than {threshold} m from the reference pose")]
    NoTrigger { threshold: f64 },
    #[error("malformed track: {0}")]
    Malformed(String),
}

/// Time-ordered head-top marker positions with a per-sample validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerTrack {
    rate: f64,
    times: Vec<f64>,
    samples: Vec<Vec3>,
    valid: Vec<bool>,
}

impl MarkerTrack {
    /// A track sampled uniformly at `rate` Hz starting at time zero.
    pub fn uniform(rate: f64, samples: Vec<Vec3>, valid: Vec<bool>) -> Result<Self, SyncError> {
        let times = (0..samples.len()).map(|i| i as f64 / rate).collect();
        MarkerTrack::with_times(rate, times, samples, valid)
    }

    pub fn with_times(rate: f64, times: Vec<f64>, samples: Vec<Vec3>, valid: Vec<bool>) -> Result<Self, SyncError> {
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(SyncError::InvalidArgument(format!("rate must be positive, got {rate}")));
        }
        if times.len() != samples.len() || valid.len() != samples.len() {
            return Err(SyncError::InvalidArgument("times, samples and mask differ in length".into()));
        }
        if let Some(i) = (1..times.len()).find(|&i| !(times[i] > times[i - 1])) {
            return Err(SyncError::InvalidArgument(format!("timestamps not strictly increasing at sample {i}")));
        }
        Ok(MarkerTrack { rate, times, samples, valid })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn samples(&self) -> &[Vec3] {
        &self.samples
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// A copy with `offset` added to every sample.
    pub fn translated(&self, offset: &Vec3) -> MarkerTrack {
        MarkerTrack { samples: self.samples.iter().map(|p| p + offset).collect(), ..self.clone() }
    }
}

/// Sensor frame clock relative to the MoCap clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorClock {
    pub rate: f64,
    pub start_offset: f64,
}

impl Default for SensorClock {
    fn default() -> Self {
        SensorClock { rate: DEFAULT_SENSOR_RATE, start_offset: 0.0 }
    }
}

/// Index of the first valid sample farther than `threshold` (strictly) from
/// the first valid sample.
pub fn detect_trigger(track: &MarkerTrack, threshold: f64) -> Result<usize, SyncError> {
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(SyncError::InvalidArgument(format!("threshold must be positive, got {threshold}")));
    }
    let mut valid = track.samples.iter().zip(&track.valid).enumerate().filter(|(_, (_, &v))| v);
    let (_, (reference, _)) = valid.next().ok_or_else(|| SyncError::InvalidArgument("track has no valid samples".into()))?;
    let mut seen = 1;
    for (i, (p, _)) in valid {
        seen += 1;
        if (p - reference).norm() > threshold {
            return Ok(i);
        }
    }
    if seen < 2 {
        return Err(SyncError::InvalidArgument("track needs at least two valid samples".into()));
    }
    Err(SyncError::NoTrigger { threshold })
}

/// MoCap indices matched to consecutive sensor frames; `valid[j]` is false
/// when the index falls past the end of the MoCap recording.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pub indices: Vec<u64>,
    pub valid: Vec<bool>,
}

fn as_exact_integer(v: f64) -> Option<u128> {
    (v.fract() == 0.0 && v > 0.0 && v < 9.0e15).then_some(v as u128)
}

/// Maps sensor frame `j` to `round_half_up(mocap_start + j * mocap_rate / sensor_rate)`.
/// Integral rates are evaluated in exact integer arithmetic.
pub fn align_frames(
    mocap_rate: f64,
    sensor_rate: f64,
    mocap_start: u64,
    n_sensor_frames: usize,
    mocap_len: Option<u64>,
) -> Result<Alignment, SyncError> {
    for (name, r) in [("MoCap", mocap_rate), ("sensor", sensor_rate)] {
        if !(r > 0.0) || !r.is_finite() {
            return Err(SyncError::InvalidArgument(format!("{name} rate must be positive, got {r}")));
        }
    }
    let indices: Vec<u64> = match (as_exact_integer(mocap_rate), as_exact_integer(sensor_rate)) {
        (Some(m), Some(s)) => (0..n_sensor_frames as u128)
            .map(|j| mocap_start + ((2 * j * m + s) / (2 * s)) as u64)
            .collect(),
        _ => (0..n_sensor_frames)
            .map(|j| mocap_start + (j as f64 * mocap_rate / sensor_rate + 0.5).floor() as u64)
            .collect(),
    };
    let valid = indices.iter().map(|&i| mocap_len.map_or(true, |len| i < len)).collect();
    Ok(Alignment { indices, valid })
}

/// Aligns sensor frames whose first frame starts `clock.start_offset` seconds
/// after MoCap sample `trigger`.
pub fn align_to_trigger(
    track: &MarkerTrack,
    trigger: usize,
    clock: &SensorClock,
    n_sensor_frames: usize,
) -> Result<Alignment, SyncError> {
    if !clock.start_offset.is_finite() {
        return Err(SyncError::InvalidArgument("sensor start offset must be finite".into()));
    }
    let len = Some(track.len() as u64);
    if clock.start_offset == 0.0 {
        return align_frames(track.rate, clock.rate, trigger as u64, n_sensor_frames, len);
    }
    if !(clock.rate > 0.0) || !clock.rate.is_finite() {
        return Err(SyncError::InvalidArgument(format!("sensor rate must be positive, got {}", clock.rate)));
    }
    let mut indices = Vec::with_capacity(n_sensor_frames);
    for j in 0..n_sensor_frames {
        let offset = (clock.start_offset + j as f64 / clock.rate) * track.rate;
        let idx = (trigger as f64 + offset + 0.5).floor();
        if idx < 0.0 {
            return Err(SyncError::InvalidArgument(format!("sensor frame {j} precedes the MoCap recording")));
        }
        indices.push(idx as u64);
    }
    let valid = indices.iter().map(|&i| i < track.len() as u64).collect();
    Ok(Alignment { indices, valid })
}

#[derive(Debug, Deserialize)]
struct TrackRow {
    time_s: f64,
    x: f64,
    y: f64,
    z: f64,
    valid: String,
}

/// Reads a `time_s,x,y,z,valid` CSV track. `valid` accepts `1/0` or `true/false`.
pub fn read_track_csv<R: Read>(reader: R, rate: f64) -> Result<MarkerTrack, SyncError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let (mut times, mut samples, mut valid) = (Vec::new(), Vec::new(), Vec::new());
    for (n, row) in rdr.deserialize::<TrackRow>().enumerate() {
        let row = row.map_err(|e| SyncError::Malformed(format!("row {}: {e}", n + 1)))?;
        let v = match row.valid.to_ascii_lowercase().as_str() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(SyncError::Malformed(format!("row {}: bad valid flag '{other}'", n + 1))),
        };
        let p = Vec3::new(row.x, row.y, row.z);
        if v && !p.iter().all(|c| c.is_finite()) {
            return Err(SyncError::Malformed(format!("row {}: non-finite position", n + 1)));
        }
        times.push(row.time_s);
        samples.push(p);
        valid.push(v);
    }
    MarkerTrack::with_times(rate, times, samples, valid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn static_track(n: usize) -> Vec<Vec3> {
        vec![Vec3::new(0.1, 0.2, 1.8); n]
    }

    #[test]
    fn static_track_has_no_trigger() {
        let track = MarkerTrack::uniform(100.0, static_track(50), vec![true; 50]).unwrap();
        assert!(matches!(detect_trigger(&track, 0.1), Err(SyncError::NoTrigger { .. })));
    }

    #[test]
    fn step_displacement_detected() {
        let mut s = static_track(100);
        for p in &mut s[37..] {
            p.x += 0.15;
        }
        let track = MarkerTrack::uniform(100.0, s, vec![true; 100]).unwrap();
        assert_eq!(detect_trigger(&track, 0.1).unwrap(), 37);
    }

    #[test]
    fn threshold_is_strict() {
        let mut s = vec![Vec3::zeros(); 10];
        s[5] = Vec3::new(0.0, 0.0, 0.10);
        s[8] = Vec3::new(0.0, 0.0, 0.1000001);
        let track = MarkerTrack::uniform(100.0, s, vec![true; 10]).unwrap();
        assert_eq!(detect_trigger(&track, 0.10).unwrap(), 8);
    }

    #[test]
    fn invalid_samples_skipped() {
        let mut s = static_track(20);
        s[0] = Vec3::new(9.0, 9.0, 9.0);
        s[4] = Vec3::new(5.0, 5.0, 5.0);
        s[12].y += 0.2;
        let mut valid = vec![true; 20];
        valid[0] = false;
        valid[4] = false;
        let track = MarkerTrack::uniform(100.0, s, valid).unwrap();
        assert_eq!(detect_trigger(&track, 0.1).unwrap(), 12);
        let single = MarkerTrack::uniform(100.0, static_track(3), vec![false, true, false]).unwrap();
        assert!(matches!(detect_trigger(&single, 0.1), Err(SyncError::InvalidArgument(_))));
        assert!(detect_trigger(&track, 0.0).is_err());
    }

    #[test]
    fn timestamps_must_increase() {
        assert!(MarkerTrack::with_times(100.0, vec![0.0, 0.0], static_track(2), vec![true; 2]).is_err());
        assert!(MarkerTrack::uniform(0.0, static_track(2), vec![true; 2]).is_err());
    }

    #[test]
    fn alignment_examples() {
        let a = align_frames(100.0, 12.0, 0, 3, None).unwrap();
        assert_eq!(a.indices, vec![0, 8, 17]);
        let same = align_frames(30.0, 30.0, 7, 4, None).unwrap();
        assert_eq!(same.indices, vec![7, 8, 9, 10]);
        let half = align_frames(100.0, 50.0, 3, 4, None).unwrap();
        assert_eq!(half.indices, vec![3, 5, 7, 9]);
        let bounded = align_frames(100.0, 12.0, 0, 4, Some(20)).unwrap();
        assert_eq!(bounded.valid, vec![true, true, true, false]);
        // 1 * 3 / 2 = 1.5 rounds up.
        assert_eq!(align_frames(3.0, 2.0, 0, 2, None).unwrap().indices, vec![0, 2]);
        assert!(align_frames(0.0, 2.0, 0, 2, None).is_err());
    }

    /// Nearest MoCap index by exhaustive search; ties go to the later index.
    fn brute_force_nearest(m: f64, s: f64, start: u64, j: usize) -> u64 {
        let t = j as f64 / s;
        let mut best = 0u64;
        let mut best_d = f64::INFINITY;
        for i in 0..(t * m) as u64 + 3 {
            let d = (i as f64 / m - t).abs();
            if d <= best_d + 1e-12 {
                best = i;
                best_d = d.min(best_d);
            }
        }
        start + best
    }

    proptest! {
        #[test]
        fn alignment_matches_nearest_oracle(m in 1u32..400, s in 1u32..60, start in 0u64..500, n in 1usize..200) {
            let a = align_frames(m as f64, s as f64, start, n, None).unwrap();
            let ratio = m as f64 / s as f64;
            for j in 0..n {
                prop_assert_eq!(a.indices[j], brute_force_nearest(m as f64, s as f64, start, j));
            }
            for w in a.indices.windows(2) {
                let d = (w[1] - w[0]) as f64;
                prop_assert!(d == ratio.floor() || d == ratio.ceil());
            }
        }

        #[test]
        fn trigger_invariant_to_translation(offset in prop::array::uniform3(-100.0f64..100.0), at in 1usize..80) {
            let mut s = static_track(100);
            for (i, p) in s.iter_mut().enumerate().skip(at) {
                p.z += 0.0047 * (i - at + 1) as f64;
            }
            let track = MarkerTrack::uniform(100.0, s, vec![true; 100]).unwrap();
            let moved = track.translated(&Vec3::from(offset));
            prop_assert_eq!(detect_trigger(&track, 0.1).ok(), detect_trigger(&moved, 0.1).ok());
        }
    }

    #[test]
    fn synthetic_round_trip_within_half_period() {
        for trigger in [1usize, 13, 250, 777] {
            let clock = SensorClock::default();
            let n_mocap = 3000;
            let mut s = static_track(n_mocap);
            for p in &mut s[trigger..] {
                p.x += 0.3;
            }
            let track = MarkerTrack::uniform(100.0, s, vec![true; n_mocap]).unwrap();
            let found = detect_trigger(&track, 0.1).unwrap();
            assert_eq!(found, trigger);
            let a = align_to_trigger(&track, found, &clock, 200).unwrap();
            for (j, &idx) in a.indices.iter().enumerate() {
                let sensor_time = trigger as f64 / 100.0 + j as f64 / 12.0;
                assert!((idx as f64 / 100.0 - sensor_time).abs() <= 0.005 + 1e-12);
            }
            let shifted = align_to_trigger(&track, found, &SensorClock { rate: 12.0, start_offset: 0.1234 }, 50).unwrap();
            for (j, &idx) in shifted.indices.iter().enumerate() {
                let sensor_time = trigger as f64 / 100.0 + 0.1234 + j as f64 / 12.0;
                assert!((idx as f64 / 100.0 - sensor_time).abs() <= 0.005 + 1e-12);
            }
        }
    }

    #[test]
    fn csv_reader() {
        let text = "time_s,x,y,z,valid\n0.00,0,0,1.8,1\n0.01,0,0,1.8,false\n0.02,0.2,0,1.8,true\n";
        let track = read_track_csv(text.as_bytes(), 100.0).unwrap();
        assert_eq!(track.len(), 3);
        assert_eq!(track.valid(), &[true, false, true]);
        assert_eq!(detect_trigger(&track, 0.1).unwrap(), 2);
        assert!(read_track_csv("time_s,x,y,z,valid\n0,0,0,0,maybe\n".as_bytes(), 100.0).is_err());
        assert!(read_track_csv("time_s,x,y,z,valid\n0,0,0,0,1\n0,0,0,0,1\n".as_bytes(), 100.0).is_err());
    }
}
