//! Binary message trace: every uplink and downlink of a run, in order.
//!
//! Little-endian records, each `tag: u8`, `len: u32`, then `len` payload bytes.
//!
//! - tag 1, uplink: `round u64, client u64, nonce u64, rows u64, cols u64`,
//!   the `h`, `h+`, `h-` matrices as `rows * cols` f64 each, then
//!   `labels: u32` count and that many u64 labels.
//! - tag 2, downlink: `round u64, client u64, nonce u64, delta f64`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::aggregation::GlobalState;
use crate::matrix::Matrix;
use crate::metrics::RunRecord;
use crate::protocol::{DownLink, PairRoundOutcome, UpLink};
use crate::sim::{RunObserver, SimError};

const TAG_UPLINK: u8 = 1;
const TAG_DOWNLINK: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum TraceEvent {
    Up { round: u64, client: u64, message: UpLink },
    Down { round: u64, client: u64, message: DownLink },
}

pub struct TraceWriter<W: Write> {
    out: W,
}

impl TraceWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> io::Result<Self> {
        Ok(TraceWriter { out: BufWriter::new(File::create(path)?) })
    }
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        TraceWriter { out }
    }

    pub fn write(&mut self, event: &TraceEvent) -> io::Result<()> {
        let mut buf = Vec::new();
        let tag = match event {
            TraceEvent::Up { round, client, message } => {
                for v in [*round, *client, message.nonce, message.h.rows() as u64, message.h.cols() as u64] {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                for m in [&message.h, &message.h_plus, &message.h_minus] {
                    for v in m.as_slice() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                buf.extend_from_slice(&(message.labels.len() as u32).to_le_bytes());
                for &l in &message.labels {
                    buf.extend_from_slice(&(l as u64).to_le_bytes());
                }
                TAG_UPLINK
            }
            TraceEvent::Down { round, client, message } => {
                for v in [*round, *client, message.nonce] {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                buf.extend_from_slice(&message.delta.to_le_bytes());
                TAG_DOWNLINK
            }
        };
        self.out.write_all(&[tag])?;
        self.out.write_all(&(buf.len() as u32).to_le_bytes())?;
        self.out.write_all(&buf)
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> RunObserver for TraceWriter<W> {
    fn on_pair(&mut self, round: usize, client: usize, outcome: &PairRoundOutcome) -> Result<(), SimError> {
        let (round, client) = (round as u64, client as u64);
        self.write(&TraceEvent::Up { round, client, message: outcome.uplink.clone() })?;
        self.write(&TraceEvent::Down { round, client, message: outcome.downlink })?;
        Ok(())
    }

    fn on_round(&mut self, _global: &GlobalState, _record: &RunRecord) -> Result<(), SimError> {
        self.flush()?;
        Ok(())
    }
}

fn bad(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> io::Result<[u8; N]> {
        if self.0.len() < N {
            return Err(bad("truncated trace record"));
        }
        let (head, rest) = self.0.split_at(N);
        self.0 = rest;
        Ok(head.try_into().expect("length checked"))
    }

    fn u64(&mut self) -> io::Result<u64> {
        self.take::<8>().map(u64::from_le_bytes)
    }

    fn f64(&mut self) -> io::Result<f64> {
        self.take::<8>().map(f64::from_le_bytes)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> io::Result<Matrix> {
        let n = rows.checked_mul(cols).ok_or_else(|| bad("matrix size overflow"))?;
        if self.0.len() / 8 < n {
            return Err(bad("truncated matrix"));
        }
        let data = (0..n).map(|_| self.f64()).collect::<io::Result<Vec<_>>>()?;
        Matrix::from_vec(rows, cols, data).ok_or_else(|| bad("bad matrix shape"))
    }
}

/// Reads every event of a trace stream.
pub fn read_trace<R: Read>(input: R) -> io::Result<Vec<TraceEvent>> {
    let mut input = BufReader::new(input);
    let mut events = Vec::new();
    loop {
        let mut tag = [0u8; 1];
        match input.read_exact(&mut tag) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(events),
            Err(e) => return Err(e),
        }
        let mut len = [0u8; 4];
        input.read_exact(&mut len)?;
        let mut payload = vec![0u8; u32::from_le_bytes(len) as usize];
        input.read_exact(&mut payload)?;
        let mut c = Cursor(&payload);
        let event = match tag[0] {
            TAG_UPLINK => {
                let (round, client, nonce) = (c.u64()?, c.u64()?, c.u64()?);
                let (rows, cols) = (c.u64()? as usize, c.u64()? as usize);
                let h = c.matrix(rows, cols)?;
                let h_plus = c.matrix(rows, cols)?;
                let h_minus = c.matrix(rows, cols)?;
                let count = u32::from_le_bytes(c.take::<4>()?) as usize;
                let labels = (0..count).map(|_| c.u64().map(|l| l as usize)).collect::<io::Result<Vec<_>>>()?;
                TraceEvent::Up { round, client, message: UpLink { nonce, h, h_plus, h_minus, labels } }
            }
            TAG_DOWNLINK => {
                let (round, client, nonce) = (c.u64()?, c.u64()?, c.u64()?);
                let delta = c.f64()?;
                TraceEvent::Down { round, client, message: DownLink { nonce, delta } }
            }
            other => return Err(bad(&format!("unknown trace tag {other}"))),
        };
        if !c.0.is_empty() {
            return Err(bad("trailing bytes in trace record"));
        }
        events.push(event);
    }
}

pub fn read_trace_file(path: &Path) -> io::Result<Vec<TraceEvent>> {
    read_trace(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_up() -> TraceEvent {
        let m = |s: f64| Matrix::from_vec(2, 3, (0..6).map(|i| s * i as f64 + 0.1).collect()).unwrap();
        TraceEvent::Up {
            round: 3,
            client: 7,
            message: UpLink { nonce: 3, h: m(1.0), h_plus: m(1.5), h_minus: m(-0.5), labels: vec![0, 2] },
        }
    }

    #[test]
    fn round_trip() {
        let events = vec![
            sample_up(),
            TraceEvent::Down { round: 3, client: 7, message: DownLink { nonce: 3, delta: -1.25e-7 } },
        ];
        let mut w = TraceWriter::new(Vec::new());
        for e in &events {
            w.write(e).unwrap();
        }
        let bytes = w.into_inner();
        assert_eq!(read_trace(bytes.as_slice()).unwrap(), events);
    }

    #[test]
    fn truncated_trace_is_an_error() {
        let mut w = TraceWriter::new(Vec::new());
        w.write(&sample_up()).unwrap();
        let bytes = w.into_inner();
        assert!(read_trace(&bytes[..bytes.len() - 3]).is_err());
        assert!(read_trace(&[9u8, 0, 0, 0, 0][..]).is_err());
    }
}
