//! Bit-exact persistence: HGCK named-tensor checkpoints, HGD1 preference
//! datasets, PPM image export, and key=value / JSON reports.
//!
//! HGCK: "HGCK" | u16 version | 32-byte config hash | u32 count |
//!   entries { u32 name_len | name | u32 ndim | u32 dims... | f64 data LE }
//!   | u32 CRC32 over all preceding bytes.
//!
//! HGD1: "HGD1" | u32 count | records { u32 prompt_id | u8 stage tag |
//!   winner tensor | loser tensor | f64 winner score | f64 loser score }
//!   followed by a trailer (32-byte config hash | u32 CRC32). Tensor blocks
//!   are u32 ndim | u32 dims... | f64 data LE.
//!
//! Writes go to a temp file in the target directory and are renamed into
//! place, so partially written artifacts are never visible.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::dataset::{PreferenceTriplet, StageTag, TripletDataset};
use crate::error::{FileFault, HgError, Result};
use crate::metrics::StageReport;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HGCK";
pub const CHECKPOINT_VERSION: u16 = 1;
pub const DATASET_MAGIC: &[u8; 4] = b"HGD1";

pub type ConfigHash = [u8; 32];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HgError + '_ {
    move |source| HgError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write bytes atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "artifact".into())
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(HgError::Corrupt {
                path: self.path.to_path_buf(),
                fault: FileFault::Truncated,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn push_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.extend((t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend((d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend(v.to_le_bytes());
    }
}

fn read_tensor(cur: &mut Cursor<'_>) -> Result<Tensor> {
    let ndim = cur.u32()? as usize;
    if ndim > 8 {
        return Err(HgError::Corrupt {
            path: cur.path.to_path_buf(),
            fault: FileFault::Truncated,
        });
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(cur.u32()? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(cur.f64()?);
    }
    Tensor::new(shape, data)
}

/// Serialize named tensors (order preserved).
pub fn save_checkpoint(path: &Path, entries: &[(String, &Tensor)], hash: &ConfigHash) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend(CHECKPOINT_MAGIC);
    buf.extend(CHECKPOINT_VERSION.to_le_bytes());
    buf.extend(hash);
    buf.extend((entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        buf.extend((name.len() as u32).to_le_bytes());
        buf.extend(name.as_bytes());
        push_tensor(&mut buf, tensor);
    }
    let crc = crc32fast::hash(&buf);
    buf.extend(crc.to_le_bytes());
    write_atomic(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<(Vec<(String, Tensor)>, ConfigHash)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 4 + 2 + 32 + 4 + 4 {
        return Err(HgError::Corrupt {
            path: path.to_path_buf(),
            fault: FileFault::Truncated,
        });
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(HgError::Corrupt {
            path: path.to_path_buf(),
            fault: FileFault::CrcMismatch,
        });
    }
    let mut cur = Cursor {
        bytes: body,
        pos: 0,
        path,
    };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(HgError::Corrupt {
            path: path.to_path_buf(),
            fault: FileFault::BadMagic,
        });
    }
    if cur.u16()? != CHECKPOINT_VERSION {
        return Err(HgError::Corrupt {
            path: path.to_path_buf(),
            fault: FileFault::VersionMismatch,
        });
    }
    let mut hash = [0u8; 32];
    hash.copy_from_slice(cur.take(32)?);
    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec()).map_err(|_| HgError::Corrupt {
            path: path.to_path_buf(),
            fault: FileFault::Truncated,
        })?;
        let tensor = read_tensor(&mut cur)?;
        entries.push((name, tensor));
    }
    Ok((entries, hash))
}

pub fn save_dataset(path: &Path, ds: &TripletDataset, hash: &ConfigHash) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend(DATASET_MAGIC);
    buf.extend((ds.triplets.len() as u32).to_le_bytes());
    for t in &ds.triplets {
        buf.extend(t.prompt_id.to_le_bytes());
        buf.push(t.stage.as_u8());
        push_tensor(&mut buf, &t.winner);
        push_tensor(&mut buf, &t.loser);
        buf.extend(t.winner_score.to_le_bytes());
        buf.extend(t.loser_score.to_le_bytes());
    }
    buf.extend(hash);
    let crc = crc32fast::hash(&buf);
    buf.extend(crc.to_le_bytes());
    write_atomic(path, &buf)
}

pub fn load_dataset(path: &Path) -> Result<(TripletDataset, ConfigHash)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 4 + 4 + 32 + 4 {
        return Err(HgError::Corrupt {
            path: path.to_path_buf(),
            fault: FileFault::Truncated,
        });
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(HgError::Corrupt {
            path: path.to_path_buf(),
            fault: FileFault::CrcMismatch,
        });
    }
    let mut cur = Cursor {
        bytes: body,
        pos: 0,
        path,
    };
    if cur.take(4)? != DATASET_MAGIC {
        return Err(HgError::Corrupt {
            path: path.to_path_buf(),
            fault: FileFault::BadMagic,
        });
    }
    let count = cur.u32()? as usize;
    let mut triplets = Vec::with_capacity(count);
    for _ in 0..count {
        let prompt_id = cur.u32()?;
        let stage = StageTag::from_u8(cur.u8()?).ok_or_else(|| HgError::Corrupt {
            path: path.to_path_buf(),
            fault: FileFault::Truncated,
        })?;
        let winner = read_tensor(&mut cur)?;
        let loser = read_tensor(&mut cur)?;
        let winner_score = cur.f64()?;
        let loser_score = cur.f64()?;
        triplets.push(PreferenceTriplet {
            prompt_id,
            stage,
            winner,
            loser,
            winner_score,
            loser_score,
        });
    }
    let mut hash = [0u8; 32];
    hash.copy_from_slice(cur.take(32)?);
    let stage = triplets.first().map(|t| t.stage).unwrap_or(StageTag::Easy);
    Ok((TripletDataset { stage, triplets }, hash))
}

/// 8-bit binary PPM; pixel byte = round((v+1)/2 * 255), clamped.
pub fn save_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(HgError::validation(format!(
            "ppm export expects [3,H,W], got {:?}",
            shape
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let block = h * w;
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..block {
        for ch in 0..3 {
            let v = img.data()[ch * block + i];
            let byte = (((v + 1.0) / 2.0) * 255.0).round().clamp(0.0, 255.0) as u8;
            buf.push(byte);
        }
    }
    write_atomic(path, &buf)
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ReportFile {
    config_hash: String,
    report: StageReport,
}

pub fn hash_hex(hash: &ConfigHash) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

/// Persist a stage report as both `<stage>.json` and line-oriented
/// `<stage>.txt` (key=value).
pub fn save_report(dir: &Path, report: &StageReport, hash: &ConfigHash) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json_path = dir.join(format!("{}.json", report.stage));
    let file = ReportFile {
        config_hash: hash_hex(hash),
        report: report.clone(),
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| HgError::validation(format!("report serialization: {e}")))?;
    write_atomic(&json_path, json.as_bytes())?;

    let mut text = String::new();
    text.push_str(&format!("stage={}\n", report.stage));
    text.push_str(&format!("n_samples={}\n", report.n_samples));
    text.push_str(&format!("seed={}\n", report.seed));
    text.push_str(&format!("mean_oracle_score={}\n", report.mean_oracle_score));
    text.push_str(&format!("mean_alignment={}\n", report.mean_alignment));
    text.push_str(&format!("toy_fid={}\n", report.toy_fid));
    text.push_str(&format!("sharpness={}\n", report.sharpness));
    match report.hue_distance_vs_base {
        Some(h) => text.push_str(&format!("hue_distance_vs_base={h}\n")),
        None => text.push_str("hue_distance_vs_base=-\n"),
    }
    match report.win_rate_vs_base {
        Some(w) => text.push_str(&format!("win_rate_vs_base={w}\n")),
        None => text.push_str("win_rate_vs_base=-\n"),
    }
    text.push_str(&format!("config_hash={}\n", hash_hex(hash)));
    write_atomic(&dir.join(format!("{}.txt", report.stage)), text.as_bytes())?;
    Ok(json_path)
}

pub fn load_report(path: &Path) -> Result<(StageReport, String)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let file: ReportFile = serde_json::from_slice(&bytes)
        .map_err(|e| HgError::validation(format!("report parse {}: {e}", path.display())))?;
    Ok((file.report, file.config_hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use tempfile::tempdir;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.hgck");
        let mut rng = RngStream::new(1);
        let a = rng.normal_tensor(vec![3, 4]);
        let b = rng.normal_tensor(vec![7]);
        let hash = [9u8; 32];
        save_checkpoint(
            &path,
            &[("layer.w".to_string(), &a), ("layer.b".to_string(), &b)],
            &hash,
        )
        .unwrap();
        let (entries, h) = load_checkpoint(&path).unwrap();
        assert_eq!(h, hash);
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].0, "layer.w");
        assert_eq!(entries[0].1, a);
        assert_eq!(entries[1].1, b);
    }

    #[test]
    fn corrupt_byte_is_a_crc_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.hgck");
        let t = Tensor::full(vec![4], 0.5);
        save_checkpoint(&path, &[("x".to_string(), &t)], &[0u8; 32]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(HgError::Corrupt { fault, .. }) => assert_eq!(fault, FileFault::CrcMismatch),
            other => panic!("expected crc error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_bad_magic_and_version_are_distinct() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.hgck");
        let t = Tensor::full(vec![4], 0.5);
        save_checkpoint(&path, &[("x".to_string(), &t)], &[0u8; 32]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let body_len = bytes.len() - 4;

        std::fs::write(&path, &bytes[..10]).unwrap();
        match load_checkpoint(&path) {
            Err(HgError::Corrupt { fault, .. }) => assert_eq!(fault, FileFault::Truncated),
            other => panic!("{other:?}"),
        }

        let mut bad = bytes.clone();
        bad[0] = b'X';
        // fix up crc so the magic check is what trips
        let crc = crc32fast::hash(&bad[..body_len]);
        bad[body_len..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, &bad).unwrap();
        match load_checkpoint(&path) {
            Err(HgError::Corrupt { fault, .. }) => assert_eq!(fault, FileFault::BadMagic),
            other => panic!("{other:?}"),
        }

        let mut wrong_version = bytes.clone();
        wrong_version[4] = 99;
        let crc = crc32fast::hash(&wrong_version[..body_len]);
        wrong_version[body_len..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, &wrong_version).unwrap();
        match load_checkpoint(&path) {
            Err(HgError::Corrupt { fault, .. }) => assert_eq!(fault, FileFault::VersionMismatch),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.hgd");
        let mut rng = RngStream::new(2);
        let ds = TripletDataset {
            stage: StageTag::Normal,
            triplets: (0..3)
                .map(|i| PreferenceTriplet {
                    prompt_id: i,
                    stage: StageTag::Normal,
                    winner: rng.normal_tensor(vec![3, 2, 2]),
                    loser: rng.normal_tensor(vec![3, 2, 2]),
                    winner_score: 0.5 + i as f64,
                    loser_score: -0.25,
                })
                .collect(),
        };
        save_dataset(&path, &ds, &[7u8; 32]).unwrap();
        let (loaded, hash) = load_dataset(&path).unwrap();
        assert_eq!(hash, [7u8; 32]);
        assert_eq!(loaded.stage, StageTag::Normal);
        assert_eq!(loaded.triplets.len(), 3);
        for (a, b) in loaded.triplets.iter().zip(&ds.triplets) {
            assert_eq!(a.prompt_id, b.prompt_id);
            assert_eq!(a.winner, b.winner);
            assert_eq!(a.loser, b.loser);
            assert_eq!(a.winner_score, b.winner_score);
            assert_eq!(a.loser_score, b.loser_score);
        }
    }

    #[test]
    fn ppm_export_is_range_mapped() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let white = Tensor::full(vec![3, 2, 2], 1.0);
        save_ppm(&path, &white).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes[bytes.len() - 12..].iter().all(|&b| b == 255));
        let black = Tensor::full(vec![3, 2, 2], -1.0);
        save_ppm(&path, &black).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes[bytes.len() - 12..].iter().all(|&b| b == 0));
    }

    #[test]
    fn report_roundtrip() {
        let dir = tempdir().unwrap();
        let report = StageReport {
            stage: "easy".into(),
            n_samples: 8,
            seed: 3,
            mean_oracle_score: 1.25,
            mean_alignment: -0.5,
            toy_fid: 2.0,
            sharpness: 0.1,
            hue_distance_vs_base: Some(12.0),
            win_rate_vs_base: Some(0.75),
        };
        let hash = [1u8; 32];
        let json = save_report(dir.path(), &report, &hash).unwrap();
        let (loaded, hex) = load_report(&json).unwrap();
        assert_eq!(loaded, report);
        assert_eq!(hex, hash_hex(&hash));
        let text = std::fs::read_to_string(dir.path().join("easy.txt")).unwrap();
        assert!(text.contains("win_rate_vs_base=0.75"));
        assert!(text.contains("config_hash="));
    }
}
