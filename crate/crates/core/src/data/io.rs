//! On-disk layout: `root/<subject>/<condition>/<view>.gsq`, or a directory
//! `root/<subject>/<condition>/<view>/` of numbered binary PGM frames.
//!
//! `.gsq` is `GSEQ1\0`, then little-endian u16 frame count, height and
//! width, then the frames as row-major bytes.

use std::fs;
use std::path::{Path, PathBuf};

use super::frame::{SilhouetteFrame, SilhouetteSequence};
use super::sampler::Dataset;
use crate::error::{GaitError, Result};

pub const GSQ_MAGIC: &[u8; 6] = b"GSEQ1\0";
const GSQ_HEADER: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Gsq,
    Pgm,
}

fn format_err<T>(path: &Path, msg: impl std::fmt::Display) -> Result<T> {
    Err(GaitError::Format(format!("{}: {}", path.display(), msg)))
}

pub fn encode_gsq(frames: &[SilhouetteFrame]) -> Result<Vec<u8>> {
    let Some(first) = frames.first() else {
        return Err(GaitError::Format("cannot pack an empty sequence".into()));
    };
    let (h, w) = (first.height, first.width);
    if frames.len() > u16::MAX as usize || h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(GaitError::Format("sequence exceeds the u16 limits of .gsq".into()));
    }
    let mut out = Vec::with_capacity(GSQ_HEADER + frames.len() * h * w);
    out.extend_from_slice(GSQ_MAGIC);
    for v in [frames.len(), h, w] {
        out.extend_from_slice(&(v as u16).to_le_bytes());
    }
    for f in frames {
        if (f.height, f.width) != (h, w) {
            return Err(GaitError::Format("inconsistent frame sizes".into()));
        }
        out.extend_from_slice(&f.mask);
    }
    Ok(out)
}

pub fn decode_gsq(bytes: &[u8]) -> Result<Vec<SilhouetteFrame>> {
    if bytes.len() < GSQ_HEADER || &bytes[..6] != GSQ_MAGIC {
        return Err(GaitError::Format("missing GSEQ1 header".into()));
    }
    let field = |i: usize| u16::from_le_bytes([bytes[6 + 2 * i], bytes[7 + 2 * i]]) as usize;
    let (n, h, w) = (field(0), field(1), field(2));
    if bytes.len() != GSQ_HEADER + n * h * w {
        return Err(GaitError::Format(format!(
            "header declares {} frames of {}x{} but payload has {} bytes",
            n,
            h,
            w,
            bytes.len() - GSQ_HEADER
        )));
    }
    Ok(bytes[GSQ_HEADER..].chunks(h * w).map(|c| SilhouetteFrame { height: h, width: w, mask: c.to_vec() }).collect())
}

pub fn encode_pgm(frame: &SilhouetteFrame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend_from_slice(&frame.mask);
    out
}

/// Binary PGM with maxval <= 255; comments are allowed in the header.
pub fn decode_pgm(bytes: &[u8]) -> Result<SilhouetteFrame> {
    let mut pos = 0;
    let mut token = || -> Option<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let bad = |m: &str| GaitError::Format(format!("PGM: {}", m));
    if token().as_deref() != Some("P5") {
        return Err(bad("expected P5 magic"));
    }
    let mut num = || token().and_then(|t| t.parse::<usize>().ok());
    let (w, h, maxval) = (num().ok_or(bad("width"))?, num().ok_or(bad("height"))?, num().ok_or(bad("maxval"))?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit maxval is supported"));
    }
    let data = &bytes[(pos + 1).min(bytes.len())..];
    if data.len() != w * h {
        return Err(bad(&format!("expected {} pixel bytes, found {}", w * h, data.len())));
    }
    let mask =
        if maxval == 255 { data.to_vec() } else { data.iter().map(|&v| (v as usize * 255 / maxval) as u8).collect() };
    SilhouetteFrame::new(h, w, mask)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    out.sort();
    Ok(out)
}

fn name_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_pgm_dir(dir: &Path) -> Result<Vec<SilhouetteFrame>> {
    let mut frames: Vec<(u64, PathBuf)> = Vec::new();
    for p in sorted_entries(dir)? {
        if p.extension().is_some_and(|e| e == "pgm") {
            let Ok(i) = name_of(&p).parse::<u64>() else {
                return format_err(&p, "frame files must be named <index>.pgm");
            };
            frames.push((i, p));
        }
    }
    frames.sort();
    frames.iter().map(|(_, p)| decode_pgm(&fs::read(p)?).or_else(|e| format_err(p, e))).collect()
}

/// Reads every sequence under `root`. A directory with no sequences yields
/// an empty dataset.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let mut sequences = Vec::new();
    for subject_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let subject = name_of(&subject_dir);
        for cond_dir in sorted_entries(&subject_dir)?.into_iter().filter(|p| p.is_dir()) {
            let condition = cond_dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            for entry in sorted_entries(&cond_dir)? {
                let frames = if entry.is_dir() {
                    load_pgm_dir(&entry)?
                } else if entry.extension().is_some_and(|e| e == "gsq") {
                    decode_gsq(&fs::read(&entry)?).or_else(|e| format_err(&entry, e))?
                } else {
                    continue;
                };
                if frames.is_empty() {
                    continue;
                }
                let view = entry.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let view = view.strip_suffix(".gsq").unwrap_or(&view).to_string();
                let seq =
                    SilhouetteSequence::new(frames, &subject, &condition, &view).or_else(|e| format_err(&entry, e))?;
                sequences.push(seq);
            }
        }
    }
    Ok(Dataset::new(sequences))
}

pub fn save_dataset(dataset: &Dataset, root: impl AsRef<Path>, layout: Layout) -> Result<()> {
    let root = root.as_ref();
    for seq in &dataset.sequences {
        let dir = root.join(&seq.subject).join(&seq.condition);
        fs::create_dir_all(&dir)?;
        match layout {
            Layout::Gsq => fs::write(dir.join(format!("{}.gsq", seq.view)), encode_gsq(&seq.frames)?)?,
            Layout::Pgm => {
                let vdir = dir.join(&seq.view);
                fs::create_dir_all(&vdir)?;
                for (i, f) in seq.frames.iter().enumerate() {
                    fs::write(vdir.join(format!("{:04}.pgm", i)), encode_pgm(f))?;
                }
            }
        }
    }
    Ok(())
}
