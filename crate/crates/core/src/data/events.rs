//! Event-camera streams and their accumulation into per-step frames.
//!
//! File layout, little-endian:
//!
//! ```text
//! offset 0   magic  b"MTEV"
//!        4   width  u32
//!        8   height u32
//!        12  count  u32
//!        16  count × { t: u32 (µs), x: u16, y: u16, polarity: u8 }   9 bytes each
//! ```

use std::ops::Range;
use std::path::Path;

use super::Dataset;
use crate::config::Slicing;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const EVENT_MAGIC: [u8; 4] = *b"MTEV";
pub const EVENT_HEADER_LEN: usize = 16;
pub const EVENT_RECORD_LEN: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EventRecord {
    pub t: u32,
    pub x: u16,
    pub y: u16,
    pub polarity: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    pub width: u32,
    pub height: u32,
    pub events: Vec<EventRecord>,
}

impl EventStream {
    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.events.iter().enumerate() {
            if e.x as u32 >= self.width || e.y as u32 >= self.height || e.polarity > 1 {
                return Err(Error::invalid(
                    "events",
                    format!(
                        "event {i} ({}, {}, polarity {}) outside {}×{} sensor",
                        e.x, e.y, e.polarity, self.width, self.height
                    ),
                ));
            }
            if i > 0 && e.t < self.events[i - 1].t {
                return Err(Error::invalid(
                    "events",
                    format!("event {i} is out of time order"),
                ));
            }
        }
        Ok(())
    }
}

/// Per-step frames `[2, h, w]` of event counts, channel 0 for polarity 0.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence<T> {
    pub frames: Vec<Tensor<T>>,
    pub label: usize,
}

pub fn encode_events(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(EVENT_HEADER_LEN + stream.events.len() * EVENT_RECORD_LEN);
    out.extend_from_slice(&EVENT_MAGIC);
    out.extend_from_slice(&stream.width.to_le_bytes());
    out.extend_from_slice(&stream.height.to_le_bytes());
    out.extend_from_slice(&(stream.events.len() as u32).to_le_bytes());
    for e in &stream.events {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.polarity);
    }
    out
}

pub fn decode_events(bytes: &[u8]) -> Result<EventStream> {
    let bad = |msg: String| Err(Error::invalid("events", msg));
    if bytes.len() < EVENT_HEADER_LEN || bytes[..4] != EVENT_MAGIC {
        return bad("missing event file header".into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let (width, height, count) = (u32_at(4), u32_at(8), u32_at(12) as usize);
    let body = &bytes[EVENT_HEADER_LEN..];
    if body.len() != count * EVENT_RECORD_LEN {
        return bad(format!(
            "header announces {count} events but {} body bytes follow (byte offset {EVENT_HEADER_LEN})",
            body.len()
        ));
    }
    let events = body
        .chunks_exact(EVENT_RECORD_LEN)
        .map(|r| EventRecord {
            t: u32::from_le_bytes(r[0..4].try_into().unwrap()),
            x: u16::from_le_bytes(r[4..6].try_into().unwrap()),
            y: u16::from_le_bytes(r[6..8].try_into().unwrap()),
            polarity: r[8],
        })
        .collect();
    let stream = EventStream {
        width,
        height,
        events,
    };
    stream.validate()?;
    Ok(stream)
}

pub fn load_events(path: &Path) -> Result<EventStream> {
    decode_events(&std::fs::read(path)?).map_err(|e| Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Sizes of `steps` contiguous slices of `n` events: `⌈n/steps⌉` for the first
/// `n mod steps` slices, `⌊n/steps⌋` for the rest.
pub fn slice_sizes(n: usize, steps: usize) -> Vec<usize> {
    (0..steps)
        .map(|i| n / steps + usize::from(i < n % steps))
        .collect()
}

fn slices(events: &[EventRecord], steps: usize, slicing: Slicing) -> Vec<Range<usize>> {
    match slicing {
        Slicing::Count => {
            let mut start = 0;
            slice_sizes(events.len(), steps)
                .into_iter()
                .map(|n| {
                    start += n;
                    start - n..start
                })
                .collect()
        }
        Slicing::Time => {
            let (Some(first), Some(last)) = (events.first(), events.last()) else {
                return vec![0..0; steps];
            };
            let span = (last.t - first.t) as u64 + 1;
            let slot = |e: &EventRecord| ((e.t - first.t) as u64 * steps as u64 / span) as usize;
            let mut out = Vec::with_capacity(steps);
            let mut start = 0;
            for s in 0..steps {
                let end = start + events[start..].iter().take_while(|e| slot(e) == s).count();
                out.push(start..end);
                start = end;
            }
            out
        }
    }
}

/// Accumulates a time-sorted stream into `steps` count frames `[2, h, w]`.
pub fn events_to_frames<T: Real>(
    events: &[EventRecord],
    steps: usize,
    h: usize,
    w: usize,
    slicing: Slicing,
) -> Result<Vec<Tensor<T>>> {
    if steps == 0 {
        return Err(Error::invalid(
            "events_to_frames",
            "steps must be at least 1",
        ));
    }
    if events.windows(2).any(|p| p[1].t < p[0].t) {
        return Err(Error::invalid(
            "events_to_frames",
            "stream is not sorted by time",
        ));
    }
    slices(events, steps, slicing)
        .into_iter()
        .map(|range| {
            let mut frame = vec![T::zero(); 2 * h * w];
            for e in &events[range] {
                let (x, y, p) = (e.x as usize, e.y as usize, e.polarity as usize);
                if x >= w || y >= h || p > 1 {
                    return Err(Error::invalid(
                        "events_to_frames",
                        format!("event ({x}, {y}, polarity {p}) outside {w}×{h} frame"),
                    ));
                }
                frame[(p * h + y) * w + x] += T::one();
            }
            Tensor::new(vec![2, h, w], frame)
        })
        .collect()
}

/// Reads `dir/<label>/*.evt` into a sequence dataset, files in name order.
pub fn load_event_split<T: Real>(
    dir: &Path,
    steps: usize,
    h: usize,
    w: usize,
    slicing: Slicing,
) -> Result<Dataset<T>> {
    let io_err = |e: std::io::Error| Error::Format {
        path: dir.display().to_string(),
        msg: e.to_string(),
    };
    let mut classes: Vec<(usize, std::path::PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err)? {
        let path = entry.map_err(io_err)?.path();
        if let Some(label) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.parse().ok())
        {
            if path.is_dir() {
                classes.push((label, path));
            }
        }
    }
    classes.sort();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (label, class_dir) in classes {
        let mut files: Vec<_> = std::fs::read_dir(&class_dir)
            .map_err(io_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "evt"))
            .collect();
        files.sort();
        for f in files {
            let stream = load_events(&f)?;
            for frame in events_to_frames::<T>(&stream.events, steps, h, w, slicing)? {
                data.extend(frame.into_data());
            }
            labels.push(label);
        }
    }
    Dataset::new([2, h, w], Some(steps), data, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(n: usize) -> Vec<EventRecord> {
        (0..n)
            .map(|i| EventRecord {
                t: i as u32 * 10,
                x: (i % 4) as u16,
                y: (i % 3) as u16,
                polarity: (i % 2) as u8,
            })
            .collect()
    }

    fn sums(frames: &[Tensor<f64>]) -> Vec<f64> {
        frames.iter().map(|f| f.data().iter().sum()).collect()
    }

    #[test]
    fn ten_events_two_steps() {
        let f = events_to_frames::<f64>(&stream(10), 2, 3, 4, Slicing::Count).unwrap();
        assert_eq!(sums(&f), vec![5.0, 5.0]);
    }

    #[test]
    fn remainder_goes_to_early_slices() {
        let f = events_to_frames::<f64>(&stream(7), 2, 3, 4, Slicing::Count).unwrap();
        assert_eq!(sums(&f), vec![4.0, 3.0]);
        assert_eq!(slice_sizes(11, 4), vec![3, 3, 3, 2]);
    }

    #[test]
    fn single_step_keeps_everything() {
        let f = events_to_frames::<f64>(&stream(13), 1, 3, 4, Slicing::Count).unwrap();
        assert_eq!(sums(&f), vec![13.0]);
    }

    #[test]
    fn empty_stream_gives_zero_frames() {
        for slicing in [Slicing::Count, Slicing::Time] {
            let f = events_to_frames::<f64>(&[], 3, 2, 2, slicing).unwrap();
            assert_eq!(f.len(), 3);
            assert!(f
                .iter()
                .all(|t| t.data().iter().all(|&v| v == 0.0) && t.shape() == [2, 2, 2]));
        }
    }

    #[test]
    fn time_windows() {
        // timestamps 0, 10, ..., 90 over two windows of 45 µs
        let f = events_to_frames::<f64>(&stream(10), 2, 3, 4, Slicing::Time).unwrap();
        assert_eq!(sums(&f), vec![5.0, 5.0]);
        let mut s = stream(4);
        s[3].t = 1000;
        let f = events_to_frames::<f64>(&s, 2, 3, 4, Slicing::Time).unwrap();
        assert_eq!(sums(&f), vec![3.0, 1.0]);
    }

    #[test]
    fn polarity_selects_channel() {
        let e = [EventRecord {
            t: 0,
            x: 1,
            y: 0,
            polarity: 1,
        }];
        let f = events_to_frames::<f64>(&e, 1, 2, 2, Slicing::Count).unwrap();
        assert_eq!(f[0].data(), &[0., 0., 0., 0., 0., 1., 0., 0.]);
    }

    #[test]
    fn file_round_trip_and_errors() {
        let s = EventStream {
            width: 4,
            height: 3,
            events: stream(6),
        };
        let bytes = encode_events(&s);
        assert_eq!(bytes.len(), EVENT_HEADER_LEN + 6 * EVENT_RECORD_LEN);
        assert_eq!(decode_events(&bytes).unwrap(), s);
        assert!(decode_events(&bytes[..bytes.len() - 1]).is_err());
        let mut unsorted = s.clone();
        unsorted.events.swap(0, 1);
        assert!(decode_events(&encode_events(&unsorted)).is_err());
        assert!(events_to_frames::<f64>(&unsorted.events, 2, 3, 4, Slicing::Count).is_err());
        assert!(events_to_frames::<f64>(&s.events, 1, 2, 2, Slicing::Count).is_err());
    }
}
