//! Binary (`INFD`) and CSV dataset files.
//!
//! Header: magic `INFD`, version u32, state-dim u32, action-dim u32, record
//! count u64. Each record holds `s, a, r, s', a'` as f64, `terminal` u8,
//! `trajectory-id` u32 and, in debug files only, `hidden-intention-id` u32.
//! Debug files are recognised by their record width. Masked rewards are NaN.
//! All fields are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::dataset::TransitionDataset;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"INFD";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8;

fn fmt_err(detail: impl Into<String>) -> Error {
    Error::Format { what: "dataset file", detail: detail.into() }
}

fn record_len(sd: usize, ad: usize, debug: bool) -> usize {
    8 * (2 * sd + 2 * ad + 1) + 1 + 4 + if debug { 4 } else { 0 }
}

/// Serialise; `debug` includes the hidden intention ids.
pub fn encode_dataset(d: &TransitionDataset, debug: bool) -> Result<Vec<u8>> {
    let ids = match (debug, &d.intentions) {
        (true, Some(ids)) => Some(ids),
        (true, None) => return Err(fmt_err("debug export needs hidden intention ids")),
        (false, _) => None,
    };
    let (sd, ad) = (d.state_dim, d.action_dim);
    let mut out = Vec::with_capacity(HEADER_LEN + d.len() * record_len(sd, ad, debug));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(sd as u32).to_le_bytes());
    out.extend_from_slice(&(ad as u32).to_le_bytes());
    out.extend_from_slice(&(d.len() as u64).to_le_bytes());
    let put = |out: &mut Vec<u8>, vals: &[f64]| vals.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    for i in 0..d.len() {
        put(&mut out, d.state(i));
        put(&mut out, d.action(i));
        put(&mut out, &[d.rewards[i]]);
        put(&mut out, d.next_state(i));
        put(&mut out, d.next_action(i));
        out.push(d.terminals[i] as u8);
        out.extend_from_slice(&d.traj_ids[i].to_le_bytes());
        if let Some(ids) = ids {
            out.extend_from_slice(&ids[i].to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| fmt_err("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize, out: &mut Vec<f64>) -> Result<()> {
        for c in self.take(8 * n)?.chunks_exact(8) {
            out.push(f64::from_le_bytes(c.try_into().expect("8 bytes")));
        }
        Ok(())
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<TransitionDataset> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != DATASET_MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let sd = r.u32()? as usize;
    let ad = r.u32()? as usize;
    let n = usize::try_from(r.u64()?).map_err(|_| fmt_err("record count overflows"))?;
    let body = buf.len() - HEADER_LEN;
    let debug = if n == 0 || body == n * record_len(sd, ad, false) {
        false
    } else if body == n * record_len(sd, ad, true) {
        true
    } else {
        return Err(fmt_err(format!("{body} body bytes do not fit {n} records")));
    };
    let (mut s, mut a, mut rew, mut s2, mut a2) = (vec![], vec![], vec![], vec![], vec![]);
    let (mut term, mut traj, mut ids) = (vec![], vec![], vec![]);
    for _ in 0..n {
        r.f64s(sd, &mut s)?;
        r.f64s(ad, &mut a)?;
        r.f64s(1, &mut rew)?;
        r.f64s(sd, &mut s2)?;
        r.f64s(ad, &mut a2)?;
        term.push(match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(fmt_err(format!("terminal byte {b}"))),
        });
        traj.push(r.u32()?);
        if debug {
            ids.push(r.u32()?);
        }
    }
    TransitionDataset::from_parts(sd, ad, s, a, rew, s2, a2, term, traj, debug.then_some(ids))
}

pub fn write_dataset(path: &Path, d: &TransitionDataset, debug: bool) -> Result<()> {
    fs::write(path, encode_dataset(d, debug)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<TransitionDataset> {
    decode_dataset(&fs::read(path)?)
}

/// CSV export with the same columns as the binary records.
pub fn write_dataset_csv(path: &Path, d: &TransitionDataset) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    let mut header: Vec<String> = Vec::new();
    header.extend((0..d.state_dim).map(|i| format!("s{i}")));
    header.extend((0..d.action_dim).map(|i| format!("a{i}")));
    header.push("r".into());
    header.extend((0..d.state_dim).map(|i| format!("next_s{i}")));
    header.extend((0..d.action_dim).map(|i| format!("next_a{i}")));
    header.extend(["terminal".to_string(), "trajectory_id".to_string()]);
    if d.intentions.is_some() {
        header.push("intention_id".into());
    }
    writeln!(f, "{}", header.join(","))?;
    for i in 0..d.len() {
        let mut cols: Vec<String> = Vec::new();
        cols.extend(d.state(i).iter().map(|v| v.to_string()));
        cols.extend(d.action(i).iter().map(|v| v.to_string()));
        cols.push(d.rewards[i].to_string());
        cols.extend(d.next_state(i).iter().map(|v| v.to_string()));
        cols.extend(d.next_action(i).iter().map(|v| v.to_string()));
        cols.push((d.terminals[i] as u8).to_string());
        cols.push(d.traj_ids[i].to_string());
        if let Some(ids) = &d.intentions {
            cols.push(ids[i].to_string());
        }
        writeln!(f, "{}", cols.join(","))?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TransitionDataset {
        TransitionDataset::from_parts(
            2,
            1,
            vec![0.0, 1.0, 2.0, 3.0],
            vec![0.5, -0.5],
            vec![f64::NAN, 1.0],
            vec![2.0, 3.0, 4.0, 5.0],
            vec![-0.5, 0.25],
            vec![false, true],
            vec![7, 7],
            Some(vec![1, 1]),
        )
        .unwrap()
    }

    #[test]
    fn layout_is_exact() {
        let d = tiny();
        let bytes = encode_dataset(&d, false).unwrap();
        assert_eq!(&bytes[..4], b"INFD");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 24 + 2 * (8 * 7 + 5));
        // first record: s = (0, 1)
        assert_eq!(f64::from_le_bytes(bytes[24..32].try_into().unwrap()), 0.0);
        assert_eq!(f64::from_le_bytes(bytes[32..40].try_into().unwrap()), 1.0);
        let debug = encode_dataset(&d, true).unwrap();
        assert_eq!(debug.len(), bytes.len() + 8);
    }

    #[test]
    fn round_trips() {
        let d = tiny();
        let back = decode_dataset(&encode_dataset(&d, true).unwrap()).unwrap();
        assert_eq!(back.intentions, d.intentions);
        assert_eq!(back.states, d.states);
        assert!(back.rewards[0].is_nan());
        let plain = decode_dataset(&encode_dataset(&d, false).unwrap()).unwrap();
        assert_eq!(plain.intentions, None);
        assert_eq!(plain.traj_ids, d.traj_ids);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = encode_dataset(&tiny(), false).unwrap();
        assert!(decode_dataset(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode_dataset(&bytes).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        write_dataset_csv(&p, &tiny()).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "s0,s1,a0,r,next_s0,next_s1,next_a0,terminal,trajectory_id,intention_id");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].contains("NaN"));
    }
}
