//! On-disk expert demonstrations.
//!
//! ```text
//! <root>/episode_<idx>/frame_<t>.png   8-bit RGB
//! <root>/episode_<idx>/meta.jsonl      one record per frame
//! <root>/manifest.json                 seed stream, config echo, checksums
//! ```
//!
//! An episode checksum is the SHA-256 of `meta.jsonl` followed by every
//! frame file in order.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use slotbench_core::scene::episode::Trajectory;
use slotbench_core::scene::geometry::Point;
use slotbench_core::scene::{render, Image, SceneState};

use crate::config::DataConfig;
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub t: usize,
    pub state: SceneState,
    pub action: Point,
    pub target_block: usize,
    pub pole_pos: Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub index: usize,
    pub seed: u64,
    pub target_block: usize,
    pub frames: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stream: u64,
    pub config: DataConfig,
    pub episodes: Vec<EpisodeEntry>,
}

pub fn episode_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("episode_{index:05}"))
}

pub fn frame_path(root: &Path, index: usize, t: usize) -> PathBuf {
    episode_dir(root, index).join(format!("frame_{t:04}.png"))
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| HarnessError::Image(e.to_string()))?;
        w.write_image_data(&img.to_rgb8()).map_err(|e| HarnessError::Image(e.to_string()))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes))
        .read_info()
        .map_err(|e| HarnessError::Image(e.to_string()))?;
    let size = dec.output_buffer_size().ok_or_else(|| HarnessError::Image("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = dec.next_frame(&mut buf).map_err(|e| HarnessError::Image(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(HarnessError::Image(format!("expected 8-bit RGB, got {:?} {:?}", info.color_type, info.bit_depth)));
    }
    Ok(Image::from_rgb8(info.height as usize, info.width as usize, &buf[..info.buffer_size()]))
}

/// Write `episodes` under `root` (which must not yet hold a dataset) and
/// return the manifest.
pub fn write_dataset(root: &Path, stream: u64, config: &DataConfig, episodes: &[Trajectory]) -> Result<Manifest> {
    let mut entries = Vec::with_capacity(episodes.len());
    for (i, ep) in episodes.iter().enumerate() {
        let dir = episode_dir(root, i);
        fs::create_dir_all(&dir)?;
        let mut hasher = Sha256::new();
        let mut meta = Vec::new();
        for (t, (s, a)) in ep.states.iter().zip(&ep.actions).enumerate() {
            let rec = FrameRecord { t, state: s.clone(), action: *a, target_block: ep.target, pole_pos: s.pole };
            serde_json::to_writer(&mut meta, &rec)?;
            meta.push(b'\n');
        }
        fs::write(dir.join("meta.jsonl"), &meta)?;
        hasher.update(&meta);
        for (t, s) in ep.states.iter().enumerate() {
            let png = encode_png(&render(s, config.image_size, config.image_size, &config.sim))?;
            fs::write(frame_path(root, i, t), &png)?;
            hasher.update(&png);
        }
        entries.push(EpisodeEntry {
            index: i,
            seed: ep.seed,
            target_block: ep.target,
            frames: ep.len(),
            sha256: hex::encode(hasher.finalize()),
        });
    }
    let manifest = Manifest { stream, config: config.clone(), episodes: entries };
    let f = fs::File::create(root.join("manifest.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &manifest)?;
    Ok(manifest)
}

/// Read-only view of a dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read(&path).map_err(|e| HarnessError::Missing(format!("{}: {e}", path.display())))?;
        Ok(Self { root: root.to_path_buf(), manifest: serde_json::from_slice(&text)? })
    }

    pub fn len(&self) -> usize {
        self.manifest.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.episodes.is_empty()
    }

    pub fn records(&self, index: usize) -> Result<Vec<FrameRecord>> {
        let path = episode_dir(&self.root, index).join("meta.jsonl");
        let text = fs::read_to_string(&path).map_err(|e| HarnessError::Missing(format!("{}: {e}", path.display())))?;
        text.lines().map(|l| serde_json::from_str(l).map_err(HarnessError::from)).collect()
    }

    /// Stored episode as a trajectory. Every stored episode is a success.
    pub fn trajectory(&self, index: usize) -> Result<Trajectory> {
        let entry = self.entry(index)?;
        let recs = self.records(index)?;
        if recs.len() != entry.frames {
            return Err(HarnessError::Dataset(format!("episode {index}: {} records, manifest says {}", recs.len(), entry.frames)));
        }
        let actions = recs.iter().map(|r| r.action).collect();
        Ok(Trajectory { seed: entry.seed, target: entry.target_block, states: recs.into_iter().map(|r| r.state).collect(), actions, success: true })
    }

    pub fn frame(&self, index: usize, t: usize) -> Result<Image> {
        let path = frame_path(&self.root, index, t);
        let bytes = fs::read(&path).map_err(|e| HarnessError::Missing(format!("{}: {e}", path.display())))?;
        decode_png(&bytes)
    }

    fn entry(&self, index: usize) -> Result<&EpisodeEntry> {
        self.manifest
            .episodes
            .get(index)
            .ok_or_else(|| HarnessError::Dataset(format!("episode {index} out of range ({} stored)", self.len())))
    }

    /// Recompute every episode checksum and compare with the manifest.
    pub fn verify(&self) -> Result<()> {
        for e in &self.manifest.episodes {
            let dir = episode_dir(&self.root, e.index);
            let mut hasher = Sha256::new();
            hasher.update(fs::read(dir.join("meta.jsonl"))?);
            for t in 0..e.frames {
                hasher.update(fs::read(frame_path(&self.root, e.index, t))?);
            }
            if hex::encode(hasher.finalize()) != e.sha256 {
                return Err(HarnessError::Dataset(format!("checksum mismatch in episode {}", e.index)));
            }
        }
        Ok(())
    }

    /// Up to `max` `(episode, t)` pairs spread evenly over the first
    /// `episodes` episodes.
    pub fn frame_index(&self, episodes: usize, max: usize) -> Vec<(usize, usize)> {
        let all: Vec<(usize, usize)> = self
            .manifest
            .episodes
            .iter()
            .take(episodes)
            .flat_map(|e| (0..e.frames).map(move |t| (e.index, t)))
            .collect();
        spread(&all, max)
    }
}

/// At most `max` elements of `items` at evenly spaced positions, in order.
pub fn spread<T: Clone>(items: &[T], max: usize) -> Vec<T> {
    if items.len() <= max {
        return items.to_vec();
    }
    (0..max).map(|i| items[i * items.len() / max].clone()).collect()
}
