//! On-disk corpus: a key-value manifest plus one binary record per scene.
//!
//! Scene record layout (little-endian):
//!
//! | offset | size      | field                         |
//! |--------|-----------|-------------------------------|
//! | 0      | 4         | magic `PIFS`                  |
//! | 4      | 2         | version (u16, = 1)            |
//! | 6      | 2         | H (u16)                       |
//! | 8      | 2         | W (u16)                       |
//! | 10     | 2         | C (u16)                       |
//! | 12     | 4         | reserved, zero                |
//! | 16     | 4·H·W·C   | image, f32, `[H, W, C]` order |
//! | ...    | H·W       | mask, u8                      |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::catalog::{Appearance, ClassCatalog, ClassEntry, Range};
use super::corpus::{Scene, CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::Array;

pub const SCENE_MAGIC: &[u8; 4] = b"PIFS";
pub const SCENE_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
pub const MANIFEST_FILE: &str = "manifest.txt";
const FORMAT_TAG: &str = "ifss-corpus";

#[derive(Clone, Debug, PartialEq)]
pub struct SceneEntry {
    pub id: usize,
    pub file: String,
    pub primary: u32,
    pub classes: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub scenes_per_class: usize,
    pub catalog: ClassCatalog,
    pub scenes: Vec<SceneEntry>,
}

impl CorpusManifest {
    pub fn describe(
        catalog: &ClassCatalog,
        scenes_per_class: usize,
        grid: (usize, usize),
        seed: u64,
        scenes: &[Scene],
    ) -> Self {
        Self {
            seed,
            height: grid.0,
            width: grid.1,
            scenes_per_class,
            catalog: catalog.clone(),
            scenes: scenes
                .iter()
                .map(|s| SceneEntry {
                    id: s.id,
                    file: format!("scenes/{:06}.bin", s.id),
                    primary: s.primary,
                    classes: s.classes.clone(),
                })
                .collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# ifss corpus manifest");
        let _ = writeln!(out, "format = {FORMAT_TAG}");
        let _ = writeln!(out, "version = 1");
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "height = {}", self.height);
        let _ = writeln!(out, "width = {}", self.width);
        let _ = writeln!(out, "channels = {CHANNELS}");
        let _ = writeln!(out, "scenes_per_class = {}", self.scenes_per_class);
        let _ = writeln!(out, "classes = {}", self.catalog.len());
        for e in self.catalog.entries() {
            let a = &e.appearance;
            let _ = writeln!(
                out,
                "class.{} = family={} hue={}:{} saturation={}:{} value={}:{} scale={}:{} radius={} rotation={}",
                e.id,
                e.family,
                a.hue.lo,
                a.hue.hi,
                a.saturation.lo,
                a.saturation.hi,
                a.value.lo,
                a.value.hi,
                a.scale.lo,
                a.scale.hi,
                a.radius,
                a.rotation
            );
        }
        let _ = writeln!(out, "scenes = {}", self.scenes.len());
        for s in &self.scenes {
            let classes: Vec<String> = s.classes.iter().map(u32::to_string).collect();
            let _ = writeln!(
                out,
                "scene.{:06} = file={} primary={} classes={}",
                s.id,
                s.file,
                s.primary,
                classes.join(",")
            );
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(path, reason);
        let mut kv = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key = value", n + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| bad(format!("missing key {k}")));
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| bad(format!("key {k} is not an integer")))
        };
        if get("format")? != FORMAT_TAG {
            return Err(bad("not a corpus manifest".into()));
        }
        if num("version")? != 1 {
            return Err(bad("unsupported manifest version".into()));
        }
        if num("channels")? != CHANNELS as u64 {
            return Err(bad("unsupported channel count".into()));
        }

        let n_classes = num("classes")? as usize;
        let mut entries = Vec::with_capacity(n_classes);
        for id in 1..=n_classes as u32 {
            let fields = fields(get(&format!("class.{id}"))?);
            let f = |k: &str| fields.get(k).ok_or_else(|| bad(format!("class.{id}: missing {k}")));
            let range = |k: &str| -> Result<Range> {
                let (lo, hi) = f(k)?
                    .split_once(':')
                    .ok_or_else(|| bad(format!("class.{id}: {k} is not lo:hi")))?;
                Ok(Range::new(parse_f32(lo, &bad)?, parse_f32(hi, &bad)?))
            };
            entries.push(ClassEntry {
                id,
                family: f("family")?.parse()?,
                appearance: Appearance {
                    hue: range("hue")?,
                    saturation: range("saturation")?,
                    value: range("value")?,
                    scale: range("scale")?,
                    radius: parse_f32(f("radius")?, &bad)?,
                    rotation: parse_f32(f("rotation")?, &bad)?,
                },
            });
        }
        let catalog = ClassCatalog::new(entries)?;

        let n_scenes = num("scenes")? as usize;
        let mut scenes = Vec::with_capacity(n_scenes);
        for id in 0..n_scenes {
            let fields = fields(get(&format!("scene.{id:06}"))?);
            let f = |k: &str| fields.get(k).ok_or_else(|| bad(format!("scene {id}: missing {k}")));
            let parse_u32 = |s: &str| s.parse::<u32>().map_err(|_| bad(format!("scene {id}: bad class {s}")));
            scenes.push(SceneEntry {
                id,
                file: f("file")?.clone(),
                primary: parse_u32(f("primary")?)?,
                classes: f("classes")?
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(parse_u32)
                    .collect::<Result<_>>()?,
            });
        }
        Ok(Self {
            seed: num("seed")?,
            height: num("height")? as usize,
            width: num("width")? as usize,
            scenes_per_class: num("scenes_per_class")? as usize,
            catalog,
            scenes,
        })
    }
}

fn fields(v: &str) -> BTreeMap<String, String> {
    v.split_whitespace()
        .filter_map(|tok| tok.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn parse_f32(s: &str, bad: &impl Fn(String) -> Error) -> Result<f32> {
    s.parse().map_err(|_| bad(format!("bad number {s:?}")))
}

pub fn encode_scene(scene: &Scene) -> Vec<u8> {
    let (h, w) = (scene.height(), scene.width());
    let mut out = Vec::with_capacity(HEADER_LEN + h * w * CHANNELS * 4 + h * w);
    out.extend_from_slice(SCENE_MAGIC);
    out.extend_from_slice(&SCENE_VERSION.to_le_bytes());
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    out.extend_from_slice(&(CHANNELS as u16).to_le_bytes());
    out.extend_from_slice(&[0u8; 4]);
    out.extend_from_slice(&scene.image.to_le_bytes());
    out.extend_from_slice(&scene.mask);
    out
}

pub fn decode_scene(bytes: &[u8], entry: &SceneEntry, path: &Path) -> Result<Scene> {
    let bad = |r: &str| Error::format(path, r);
    if bytes.len() < HEADER_LEN || &bytes[..4] != SCENE_MAGIC {
        return Err(bad("missing PIFS magic"));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize;
    if u16_at(4) != SCENE_VERSION as usize {
        return Err(bad("unsupported scene version"));
    }
    let (h, w, c) = (u16_at(6), u16_at(8), u16_at(10));
    if c != CHANNELS {
        return Err(bad("unsupported channel count"));
    }
    let img_len = h * w * c * 4;
    if bytes.len() != HEADER_LEN + img_len + h * w {
        return Err(bad("truncated scene record"));
    }
    let image: Vec<f32> = bytes[HEADER_LEN..HEADER_LEN + img_len]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Scene {
        id: entry.id,
        primary: entry.primary,
        classes: entry.classes.clone(),
        image: Array::new([h, w, c], image)?,
        mask: bytes[HEADER_LEN + img_len..].to_vec(),
    })
}

pub fn write_corpus(dir: &Path, manifest: &CorpusManifest, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir.join("scenes"))?;
    for (entry, scene) in manifest.scenes.iter().zip(scenes) {
        fs::write(dir.join(&entry.file), encode_scene(scene))?;
    }
    fs::write(dir.join(MANIFEST_FILE), manifest.to_text())?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path: PathBuf = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::CorpusNotFound(dir.to_path_buf()));
    }
    CorpusManifest::parse(&fs::read_to_string(&path)?, &path)
}

pub fn read_corpus(dir: &Path) -> Result<(CorpusManifest, Vec<Scene>)> {
    let manifest = read_manifest(dir)?;
    let scenes = manifest
        .scenes
        .iter()
        .map(|e| {
            let path = dir.join(&e.file);
            decode_scene(&fs::read(&path)?, e, &path)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, scenes))
}
