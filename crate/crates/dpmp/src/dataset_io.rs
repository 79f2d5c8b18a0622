//! On-disk dataset container.
//!
//! A dataset is a directory:
//!
//! ```text
//! manifest            line-based text: version, counts, seed, split lists
//! scenes/NNN.img      raw little-endian f32, h·w·3, row-major RGB
//! scenes/NNN.meta     line-based text: ids, condition, target pose
//! demos/NNN_KK.traj   16-byte header (magic "TRJ1", steps u32, dims u32,
//!                     dt f32) + two little-endian f32 blocks of
//!                     dims × steps values, row-major: joint then task
//! ```
//!
//! Every parser here accepts untrusted bytes: sizes are bounds-checked
//! before allocation and malformed input yields an error, never a panic.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::promp::Trajectory;
use crate::scene::{Dataset, Demonstration, ImageBuf, Pose, Scene, SceneGenConfig, SplitIndices};

pub const MANIFEST_MAGIC: &str = "dpmp-dataset";
pub const MANIFEST_VERSION: u32 = 1;
pub const TRAJ_MAGIC: [u8; 4] = *b"TRJ1";

const MAX_SCENES: usize = 1 << 20;
const MAX_REPEATS: usize = 1 << 12;
const MAX_IMAGE_DIM: usize = 1 << 12;
const MAX_STEPS: usize = 1 << 20;
const MAX_TRAJ_DIMS: usize = 64;

#[derive(Error, Debug)]
pub enum DatasetIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dataset manifest (expected `{MANIFEST_MAGIC}` header)")]
    BadMagic,
    #[error("unsupported dataset version {found} (expected {MANIFEST_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
}

fn corrupt(msg: impl Into<String>) -> DatasetIoError {
    DatasetIoError::Corrupt(msg.into())
}

/// Parsed `manifest` contents.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub gen: SceneGenConfig,
    pub split: SplitIndices,
}

fn parse_usize(tok: &str, what: &str, max: usize) -> Result<usize, DatasetIoError> {
    let v: usize = tok
        .parse()
        .map_err(|_| corrupt(format!("bad {what}: {tok:?}")))?;
    if v > max {
        return Err(corrupt(format!("{what} {v} exceeds limit {max}")));
    }
    Ok(v)
}

fn parse_f64(tok: &str, what: &str) -> Result<f64, DatasetIoError> {
    let v: f64 = tok
        .parse()
        .map_err(|_| corrupt(format!("bad {what}: {tok:?}")))?;
    if !v.is_finite() {
        return Err(corrupt(format!("non-finite {what}")));
    }
    Ok(v)
}

fn parse_index_list(toks: &[&str], n_scenes: usize) -> Result<Vec<usize>, DatasetIoError> {
    toks.iter()
        .map(|t| {
            let i = parse_usize(t, "split index", MAX_SCENES)?;
            if i >= n_scenes {
                return Err(corrupt(format!("split index {i} out of range")));
            }
            Ok(i)
        })
        .collect()
}

/// Parse manifest text. Rejects unknown versions, missing fields and
/// malformed or inconsistent values.
pub fn parse_manifest(text: &str) -> Result<DatasetManifest, DatasetIoError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(DatasetIoError::BadMagic)?;
    let mut head = header.split_whitespace();
    if head.next() != Some(MANIFEST_MAGIC) {
        return Err(DatasetIoError::BadMagic);
    }
    let version: u32 = head
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or(DatasetIoError::BadMagic)?;
    if version != MANIFEST_VERSION {
        return Err(DatasetIoError::VersionMismatch { found: version });
    }

    let mut seed = None;
    let mut configs = None;
    let mut targets = None;
    let mut repeats = None;
    let mut image = None;
    let mut steps = None;
    let mut duration = None;
    let mut sigma_end = None;
    let mut sigma_mid = None;
    let mut distractors = None;
    let mut split_train: Option<Vec<String>> = None;
    let mut split_val: Option<Vec<String>> = None;
    let mut split_test: Option<Vec<String>> = None;

    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        match toks[0] {
            "seed" if toks.len() == 2 => {
                seed = Some(toks[1].parse::<u64>().map_err(|_| corrupt("bad seed"))?);
            }
            "configs" if toks.len() == 2 => {
                configs = Some(parse_usize(toks[1], "configs", MAX_SCENES)?)
            }
            "targets" if toks.len() == 2 => {
                targets = Some(parse_usize(toks[1], "targets", MAX_SCENES)?)
            }
            "repeats" if toks.len() == 2 => {
                repeats = Some(parse_usize(toks[1], "repeats", MAX_REPEATS)?)
            }
            "image" if toks.len() == 3 => {
                image = Some((
                    parse_usize(toks[1], "image height", MAX_IMAGE_DIM)?,
                    parse_usize(toks[2], "image width", MAX_IMAGE_DIM)?,
                ));
            }
            "steps" if toks.len() == 2 => steps = Some(parse_usize(toks[1], "steps", MAX_STEPS)?),
            "duration" if toks.len() == 2 => duration = Some(parse_f64(toks[1], "duration")?),
            "sigma_end" if toks.len() == 2 => sigma_end = Some(parse_f64(toks[1], "sigma_end")?),
            "sigma_mid" if toks.len() == 2 => sigma_mid = Some(parse_f64(toks[1], "sigma_mid")?),
            "distractors" if toks.len() == 2 => {
                distractors = Some(parse_usize(toks[1], "distractors", 8)?)
            }
            "split" if toks.len() >= 2 => {
                let list: Vec<String> = toks[2..].iter().map(|s| s.to_string()).collect();
                match toks[1] {
                    "train" => split_train = Some(list),
                    "val" => split_val = Some(list),
                    "test" => split_test = Some(list),
                    other => return Err(corrupt(format!("unknown split {other:?}"))),
                }
            }
            other => return Err(corrupt(format!("unknown manifest key {other:?}"))),
        }
    }

    let gen = SceneGenConfig {
        image_h: image.ok_or_else(|| corrupt("missing image"))?.0,
        image_w: image.unwrap().1,
        n_distractors: distractors.ok_or_else(|| corrupt("missing distractors"))?,
        n_configs: configs.ok_or_else(|| corrupt("missing configs"))?,
        n_targets: targets.ok_or_else(|| corrupt("missing targets"))?,
        n_repeats: repeats.ok_or_else(|| corrupt("missing repeats"))?,
        n_steps: steps.ok_or_else(|| corrupt("missing steps"))?,
        duration: duration.ok_or_else(|| corrupt("missing duration"))?,
        sigma_end: sigma_end.ok_or_else(|| corrupt("missing sigma_end"))?,
        sigma_mid: sigma_mid.ok_or_else(|| corrupt("missing sigma_mid"))?,
    };
    gen.validate()
        .map_err(|e| corrupt(format!("invalid generation config: {e}")))?;
    let n_scenes = gen
        .n_configs
        .checked_mul(gen.n_targets)
        .filter(|n| *n <= MAX_SCENES)
        .ok_or_else(|| corrupt("scene count overflow"))?;

    let as_strs = |v: &Option<Vec<String>>, what: &str| -> Result<Vec<usize>, DatasetIoError> {
        let list = v.as_ref().ok_or_else(|| corrupt(format!("missing split {what}")))?;
        parse_index_list(&list.iter().map(String::as_str).collect::<Vec<_>>(), n_scenes)
    };
    let train = as_strs(&split_train, "train")?;
    let val = as_strs(&split_val, "val")?;
    let test = as_strs(&split_test, "test")?;

    let mut seen = vec![false; n_scenes];
    for &i in train.iter().chain(&val).chain(&test) {
        if seen[i] {
            return Err(corrupt(format!("scene {i} appears in two splits")));
        }
        seen[i] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(corrupt("splits do not cover all scenes"));
    }

    Ok(DatasetManifest {
        version,
        seed: seed.ok_or_else(|| corrupt("missing seed"))?,
        gen,
        split: SplitIndices { train, val, test },
    })
}

fn write_manifest(ds: &Dataset) -> String {
    let g = &ds.gen;
    let mut out = String::new();
    out.push_str(&format!("{MANIFEST_MAGIC} {MANIFEST_VERSION}\n"));
    out.push_str(&format!("seed {}\n", ds.seed));
    out.push_str(&format!("configs {}\n", g.n_configs));
    out.push_str(&format!("targets {}\n", g.n_targets));
    out.push_str(&format!("repeats {}\n", g.n_repeats));
    out.push_str(&format!("image {} {}\n", g.image_h, g.image_w));
    out.push_str(&format!("steps {}\n", g.n_steps));
    out.push_str(&format!("duration {}\n", g.duration));
    out.push_str(&format!("sigma_end {}\n", g.sigma_end));
    out.push_str(&format!("sigma_mid {}\n", g.sigma_mid));
    out.push_str(&format!("distractors {}\n", g.n_distractors));
    for (name, list) in [
        ("train", &ds.split.train),
        ("val", &ds.split.val),
        ("test", &ds.split.test),
    ] {
        out.push_str(&format!("split {name}"));
        for i in list {
            out.push_str(&format!(" {i}"));
        }
        out.push('\n');
    }
    out
}

/// Parsed `NNN.meta` contents.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMeta {
    pub scene_index: usize,
    pub config_id: u32,
    pub target_id: u32,
    pub condition: [f64; 2],
    pub pose: Pose,
}

/// Parse one scene's metadata text.
pub fn parse_scene_meta(text: &str) -> Result<SceneMeta, DatasetIoError> {
    let mut scene_index = None;
    let mut config_id = None;
    let mut target_id = None;
    let mut condition = None;
    let mut position = None;
    let mut quaternion = None;
    for line in text.lines() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        match toks[0] {
            "scene" if toks.len() == 2 => {
                scene_index = Some(parse_usize(toks[1], "scene index", MAX_SCENES)?)
            }
            "config" if toks.len() == 2 => {
                config_id = Some(toks[1].parse::<u32>().map_err(|_| corrupt("bad config id"))?)
            }
            "target" if toks.len() == 2 => {
                target_id = Some(toks[1].parse::<u32>().map_err(|_| corrupt("bad target id"))?)
            }
            "condition" if toks.len() == 3 => {
                let u = parse_f64(toks[1], "condition")?;
                let v = parse_f64(toks[2], "condition")?;
                if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                    return Err(corrupt("condition outside [0,1]"));
                }
                condition = Some([u, v]);
            }
            "position" if toks.len() == 4 => {
                position = Some([
                    parse_f64(toks[1], "position")?,
                    parse_f64(toks[2], "position")?,
                    parse_f64(toks[3], "position")?,
                ]);
            }
            "quaternion" if toks.len() == 5 => {
                let q = [
                    parse_f64(toks[1], "quaternion")?,
                    parse_f64(toks[2], "quaternion")?,
                    parse_f64(toks[3], "quaternion")?,
                    parse_f64(toks[4], "quaternion")?,
                ];
                let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(corrupt(format!("quaternion norm {norm} not 1")));
                }
                quaternion = Some(q);
            }
            other => return Err(corrupt(format!("unknown meta key {other:?}"))),
        }
    }
    Ok(SceneMeta {
        scene_index: scene_index.ok_or_else(|| corrupt("missing scene index"))?,
        config_id: config_id.ok_or_else(|| corrupt("missing config id"))?,
        target_id: target_id.ok_or_else(|| corrupt("missing target id"))?,
        condition: condition.ok_or_else(|| corrupt("missing condition"))?,
        pose: Pose {
            position: position.ok_or_else(|| corrupt("missing position"))?,
            quaternion: quaternion.ok_or_else(|| corrupt("missing quaternion"))?,
        },
    })
}

fn write_scene_meta(index: usize, scene: &Scene) -> String {
    let p = &scene.target_pose;
    format!(
        "scene {index}\nconfig {}\ntarget {}\ncondition {} {}\nposition {} {} {}\nquaternion {} {} {} {}\n",
        scene.config_id,
        scene.target_id,
        scene.condition[0],
        scene.condition[1],
        p.position[0],
        p.position[1],
        p.position[2],
        p.quaternion[0],
        p.quaternion[1],
        p.quaternion[2],
        p.quaternion[3],
    )
}

/// Decode a raw image blob with the dimensions the manifest promised.
pub fn decode_image(bytes: &[u8], h: usize, w: usize) -> Result<ImageBuf, DatasetIoError> {
    if h == 0 || w == 0 || h > MAX_IMAGE_DIM || w > MAX_IMAGE_DIM {
        return Err(corrupt(format!("image dims {h}x{w} out of range")));
    }
    let expect = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(12))
        .ok_or_else(|| corrupt("image size overflow"))?;
    if bytes.len() != expect {
        return Err(corrupt(format!(
            "image blob is {} bytes, expected {expect}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for chunk in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            return Err(corrupt("image value outside [0,1]"));
        }
        data.push(v);
    }
    Ok(ImageBuf { h, w, data })
}

fn encode_image(image: &ImageBuf) -> Vec<u8> {
    let mut out = Vec::with_capacity(image.data.len() * 4);
    for v in &image.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decode one `.traj` file into its joint and task trajectories.
pub fn decode_trajectory_pair(bytes: &[u8]) -> Result<(Trajectory, Trajectory), DatasetIoError> {
    if bytes.len() < 16 {
        return Err(corrupt("trajectory file shorter than header"));
    }
    if bytes[0..4] != TRAJ_MAGIC {
        return Err(corrupt("bad trajectory magic"));
    }
    let steps = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dims = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dt = f32::from_le_bytes(bytes[12..16].try_into().unwrap()) as f64;
    if steps < 2 || steps > MAX_STEPS {
        return Err(corrupt(format!("step count {steps} out of range")));
    }
    if dims == 0 || dims > MAX_TRAJ_DIMS {
        return Err(corrupt(format!("dim count {dims} out of range")));
    }
    if !dt.is_finite() || dt <= 0.0 {
        return Err(corrupt("non-positive dt"));
    }
    let block = steps
        .checked_mul(dims)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| corrupt("trajectory size overflow"))?;
    let expect = 16usize
        .checked_add(block.checked_mul(2).ok_or_else(|| corrupt("size overflow"))?)
        .ok_or_else(|| corrupt("size overflow"))?;
    if bytes.len() != expect {
        return Err(corrupt(format!(
            "trajectory file is {} bytes, expected {expect}",
            bytes.len()
        )));
    }
    let read_block = |offset: usize| -> Result<DMatrix<f64>, DatasetIoError> {
        let mut m = DMatrix::zeros(dims, steps);
        for d in 0..dims {
            for t in 0..steps {
                let at = offset + (d * steps + t) * 4;
                let v = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64;
                if !v.is_finite() {
                    return Err(corrupt("non-finite trajectory value"));
                }
                m[(d, t)] = v;
            }
        }
        Ok(m)
    };
    let joint = read_block(16)?;
    let task = read_block(16 + block)?;
    Ok((
        Trajectory { values: joint, dt },
        Trajectory { values: task, dt },
    ))
}

/// Encode a joint/task trajectory pair in the `.traj` layout. Values are
/// stored as f32.
pub fn encode_trajectory_pair(
    joint: &Trajectory,
    task: &Trajectory,
) -> Result<Vec<u8>, DatasetIoError> {
    let steps = joint.n_steps();
    let dims = joint.n_joints();
    if task.n_steps() != steps || task.n_joints() != dims {
        return Err(corrupt("joint/task block shape mismatch"));
    }
    let mut out = Vec::with_capacity(16 + 8 * dims * steps);
    out.extend_from_slice(&TRAJ_MAGIC);
    out.extend_from_slice(&(steps as u32).to_le_bytes());
    out.extend_from_slice(&(dims as u32).to_le_bytes());
    out.extend_from_slice(&(joint.dt as f32).to_le_bytes());
    for block in [&joint.values, &task.values] {
        for d in 0..dims {
            for t in 0..steps {
                out.extend_from_slice(&(block[(d, t)] as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Write a dataset container directory.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DatasetIoError> {
    fs::create_dir_all(path.join("scenes"))?;
    fs::create_dir_all(path.join("demos"))?;
    let mut manifest = fs::File::create(path.join("manifest"))?;
    manifest.write_all(write_manifest(ds).as_bytes())?;
    for (i, scene) in ds.scenes.iter().enumerate() {
        fs::write(
            path.join(format!("scenes/{i:03}.img")),
            encode_image(&scene.image),
        )?;
        fs::write(
            path.join(format!("scenes/{i:03}.meta")),
            write_scene_meta(i, scene),
        )?;
    }
    for (i, demo) in ds.demos.iter().enumerate() {
        let scene = demo.scene_index;
        let rep = i - scene * ds.gen.n_repeats;
        fs::write(
            path.join(format!("demos/{scene:03}_{rep:02}.traj")),
            encode_trajectory_pair(&demo.joint, &demo.task)?,
        )?;
    }
    Ok(())
}

/// Load a dataset container directory, validating every file against the
/// manifest.
pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetIoError> {
    let manifest_text = fs::read_to_string(path.join("manifest"))?;
    let manifest = parse_manifest(&manifest_text)?;
    let g = &manifest.gen;
    let n_scenes = g.n_configs * g.n_targets;

    let mut scenes = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        let img_bytes = fs::read(path.join(format!("scenes/{i:03}.img")))?;
        let image = decode_image(&img_bytes, g.image_h, g.image_w)?;
        let meta_text = fs::read_to_string(path.join(format!("scenes/{i:03}.meta")))?;
        let meta = parse_scene_meta(&meta_text)?;
        if meta.scene_index != i {
            return Err(corrupt(format!(
                "meta file {i:03} claims scene {}",
                meta.scene_index
            )));
        }
        scenes.push(Scene {
            image,
            condition: meta.condition,
            target_pose: meta.pose,
            config_id: meta.config_id,
            target_id: meta.target_id,
        });
    }

    let mut demos = Vec::with_capacity(n_scenes * g.n_repeats);
    for scene in 0..n_scenes {
        for rep in 0..g.n_repeats {
            let bytes = fs::read(path.join(format!("demos/{scene:03}_{rep:02}.traj")))?;
            let (joint, task) = decode_trajectory_pair(&bytes)?;
            if joint.n_steps() != g.n_steps {
                return Err(corrupt(format!(
                    "demo {scene:03}_{rep:02} has {} steps, manifest says {}",
                    joint.n_steps(),
                    g.n_steps
                )));
            }
            demos.push(Demonstration {
                scene_index: scene,
                joint,
                task,
            });
        }
    }

    Ok(Dataset {
        scenes,
        demos,
        split: manifest.split,
        seed: manifest.seed,
        gen: manifest.gen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::build_dataset;

    fn tiny_dataset() -> Dataset {
        let cfg = SceneGenConfig {
            image_h: 16,
            image_w: 16,
            n_distractors: 2,
            n_configs: 2,
            n_targets: 1,
            n_repeats: 2,
            n_steps: 12,
            ..SceneGenConfig::default()
        };
        build_dataset(&cfg, 99).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn wrong_version_is_reported() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let manifest_path = dir.path().join("manifest");
        let text = fs::read_to_string(&manifest_path).unwrap();
        let bumped = text.replace(
            &format!("{MANIFEST_MAGIC} {MANIFEST_VERSION}"),
            &format!("{MANIFEST_MAGIC} 999"),
        );
        fs::write(&manifest_path, bumped).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DatasetIoError::VersionMismatch { found: 999 })
        ));
    }

    #[test]
    fn corrupt_traj_is_rejected() {
        assert!(decode_trajectory_pair(b"").is_err());
        assert!(decode_trajectory_pair(b"TRJ1aaaaaaaaaaaa").is_err());
        let mut ok = encode_trajectory_pair(
            &Trajectory {
                values: DMatrix::zeros(2, 3),
                dt: 0.1,
            },
            &Trajectory {
                values: DMatrix::zeros(2, 3),
                dt: 0.1,
            },
        )
        .unwrap();
        assert!(decode_trajectory_pair(&ok).is_ok());
        ok.truncate(ok.len() - 1);
        assert!(decode_trajectory_pair(&ok).is_err());
    }

    #[test]
    fn image_blob_length_is_enforced() {
        assert!(decode_image(&[0u8; 12], 1, 1).is_ok());
        assert!(decode_image(&[0u8; 13], 1, 1).is_err());
        assert!(decode_image(&[0u8; 12], 0, 1).is_err());
        // 2.0 is outside [0,1].
        let bad = 2.0f32.to_le_bytes().repeat(3);
        assert!(decode_image(&bad, 1, 1).is_err());
    }

    #[test]
    fn manifest_rejects_overlapping_split() {
        let ds = tiny_dataset();
        let text: String = write_manifest(&ds)
            .lines()
            .map(|l| {
                if l.starts_with("split train") {
                    "split train 0 0".to_string()
                } else {
                    l.to_string()
                }
            })
            .collect::<Vec<_>>()
            .join("\n");
        assert!(parse_manifest(&text).is_err());
    }

    #[test]
    fn default_container_stays_small() {
        // Layout arithmetic for the 25-scene, 250-demo default at 64x64:
        // images 25 · 64·64·3·4 B, demos 250 · (16 + 2·7·100·4) B.
        let image_bytes = 25usize * 64 * 64 * 3 * 4;
        let demo_bytes = 250usize * (16 + 2 * 7 * 100 * 4);
        assert!(image_bytes + demo_bytes < 100_000_000);
    }
}
