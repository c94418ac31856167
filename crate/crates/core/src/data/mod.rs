//! Speech Commands ingestion: label maps, official split lists, silence
//! synthesis from background noise, and a synthetic tone task.

mod wav;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use wav::{encode_wav, normalize_length, parse_wav, SAMPLE_RATE};

use crate::error::{Error, Result};
use crate::training::{SampleSource, Split};

pub const CLIP_LEN: usize = 16_000;
pub const NOISE_DIR: &str = "_background_noise_";
pub const VALIDATION_LIST: &str = "validation_list.txt";
pub const TESTING_LIST: &str = "testing_list.txt";

pub const CORE_COMMANDS: [&str; 10] = ["yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go"];

pub const V1_KEYWORDS: [&str; 30] = [
    "bed", "bird", "cat", "dog", "down", "eight", "five", "four", "go", "happy", "house", "left", "marvin", "nine", "no",
    "off", "on", "one", "right", "seven", "sheila", "six", "stop", "three", "tree", "two", "up", "wow", "yes", "zero",
];

pub const V2_EXTRA_KEYWORDS: [&str; 5] = ["backward", "follow", "forward", "learn", "visual"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelMode {
    V1Twelve,
    V2Twelve,
    V2ThirtyFive,
}

impl LabelMode {
    pub fn name(self) -> &'static str {
        match self {
            LabelMode::V1Twelve => "v1-12",
            LabelMode::V2Twelve => "v2-12",
            LabelMode::V2ThirtyFive => "v2-35",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            LabelMode::V2ThirtyFive => 35,
            _ => 12,
        }
    }

    /// Every keyword directory of the dataset version.
    pub fn keywords(self) -> Vec<&'static str> {
        let mut k = V1_KEYWORDS.to_vec();
        if self != LabelMode::V1Twelve {
            k.extend(V2_EXTRA_KEYWORDS);
            k.sort_unstable();
        }
        k
    }
}

impl fmt::Display for LabelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v1-12" => Ok(LabelMode::V1Twelve),
            "v2-12" => Ok(LabelMode::V2Twelve),
            "v2-35" => Ok(LabelMode::V2ThirtyFive),
            other => Err(Error::Config(format!("unknown mode `{other}` (expected v1-12, v2-12 or v2-35)"))),
        }
    }
}

/// Keyword → class index. In 12-class modes the ten commands take indices
/// 0..10, silence 10 and unknown 11.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub mode: LabelMode,
    classes: Vec<String>,
    pub silence: Option<usize>,
    pub unknown: Option<usize>,
}

impl LabelMap {
    pub fn new(mode: LabelMode) -> Self {
        match mode {
            LabelMode::V2ThirtyFive => Self {
                mode,
                classes: mode.keywords().into_iter().map(String::from).collect(),
                silence: None,
                unknown: None,
            },
            _ => {
                let mut classes: Vec<String> = CORE_COMMANDS.iter().map(|s| s.to_string()).collect();
                classes.push("_silence_".into());
                classes.push("_unknown_".into());
                Self {
                    mode,
                    classes,
                    silence: Some(10),
                    unknown: Some(11),
                }
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_name(&self, index: usize) -> &str {
        &self.classes[index]
    }

    pub fn class_names(&self) -> &[String] {
        &self.classes
    }

    /// Class of a keyword directory. 12-class modes send every non-command
    /// directory to unknown; the 35-class mode rejects unlisted directories.
    pub fn index_of(&self, keyword: &str) -> Result<usize> {
        if let Some(i) = self.classes.iter().position(|c| c == keyword) {
            if Some(i) != self.silence && Some(i) != self.unknown {
                return Ok(i);
            }
        }
        self.unknown
            .ok_or_else(|| Error::Data(format!("keyword directory `{keyword}` is not one of the 35 commands")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum UtteranceSource {
    File(PathBuf),
    /// A clip cut from an in-memory recording.
    Segment { samples: Arc<Vec<f32>>, offset: usize },
    Memory(Arc<Vec<f32>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub source: UtteranceSource,
    pub label: usize,
    /// Path relative to the dataset root, or a synthetic identifier.
    pub source_path: String,
}

impl Utterance {
    /// Exactly [`CLIP_LEN`] samples in `[-1, 1]`.
    pub fn samples(&self) -> Result<Vec<f32>> {
        match &self.source {
            UtteranceSource::File(path) => {
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                let raw = parse_wav(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                normalize_length(&raw, CLIP_LEN).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
            }
            UtteranceSource::Segment { samples, offset } => {
                let end = offset + CLIP_LEN;
                if end > samples.len() {
                    return Err(Error::Data(format!("{}: segment out of range", self.source_path)));
                }
                Ok(samples[*offset..end].to_vec())
            }
            UtteranceSource::Memory(s) => normalize_length(s, CLIP_LEN),
        }
    }
}

impl SampleSource for [Utterance] {
    fn num_samples(&self) -> usize {
        self.len()
    }

    fn label(&self, i: usize) -> usize {
        self[i].label
    }

    fn waveform(&self, i: usize) -> Result<Vec<f32>> {
        self[i].samples()
    }
}

impl SampleSource for Vec<Utterance> {
    fn num_samples(&self) -> usize {
        self.len()
    }

    fn label(&self, i: usize) -> usize {
        self[i].label
    }

    fn waveform(&self, i: usize) -> Result<Vec<f32>> {
        self[i].samples()
    }
}

#[derive(Clone, Debug)]
pub struct NoiseRecording {
    pub name: String,
    pub samples: Arc<Vec<f32>>,
}

/// Fraction of each noise recording reserved for each split: the first 80%
/// feeds train, the next 10% validation, the last 10% test.
pub fn noise_range(len: usize, split: Split) -> (usize, usize) {
    let a = len * 8 / 10;
    let b = len * 9 / 10;
    match split {
        Split::Train => (0, a),
        Split::Validation => (a, b),
        Split::Test => (b, len),
    }
}

/// `count` one-second clips at seeded-random offsets inside each recording's
/// range for `split`.
pub fn synthesize_silence(noise: &[NoiseRecording], count: usize, seed: u64, split: Split, label: usize) -> Result<Vec<Utterance>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let usable: Vec<(&NoiseRecording, usize, usize)> = noise
        .iter()
        .filter_map(|r| {
            let (lo, hi) = noise_range(r.samples.len(), split);
            (hi - lo >= CLIP_LEN).then_some((r, lo, hi))
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::Config(format!(
            "no background-noise recording is long enough to cut {split} silence clips"
        )));
    }
    let split_tag = Split::ALL.iter().position(|s| *s == split).unwrap_or(0) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x51_1E_4C_E0 + split_tag));
    Ok((0..count)
        .map(|i| {
            let (rec, lo, hi) = usable[rng.gen_range(0..usable.len())];
            let offset = rng.gen_range(lo..=hi - CLIP_LEN);
            Utterance {
                source: UtteranceSource::Segment {
                    samples: rec.samples.clone(),
                    offset,
                },
                label,
                source_path: format!("{NOISE_DIR}/{}#{split}-{i}@{offset}", rec.name),
            }
        })
        .collect())
}

/// Silence clips per split so that silence is about 10% of the split.
pub fn silence_count(keyword_files: usize) -> usize {
    (keyword_files as f64 / 9.0).round() as usize
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub labels: LabelMap,
    pub train: Vec<Utterance>,
    pub validation: Vec<Utterance>,
    pub test: Vec<Utterance>,
    /// Keyword files per split, before silence was added.
    pub keyword_counts: [usize; 3],
    pub silence_counts: [usize; 3],
}

impl Dataset {
    pub fn split(&self, split: Split) -> &Vec<Utterance> {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    /// `path,label,split` lines.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for split in Split::ALL {
            for u in self.split(split) {
                out.push_str(&format!("{},{},{}\n", u.source_path, self.labels.class_name(u.label), split));
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!("mode={}\n", self.labels.mode);
        for (i, split) in Split::ALL.iter().enumerate() {
            out.push_str(&format!(
                "split={split} keyword_files={} silence={} total={}\n",
                self.keyword_counts[i],
                self.silence_counts[i],
                self.split(*split).len()
            ));
        }
        out
    }
}

fn read_list(root: &Path, name: &str) -> Result<HashSet<String>> {
    let path = root.join(name);
    if !path.is_file() {
        return Err(Error::Config(format!("missing split list {}", path.display())));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .map(|l| l.trim().replace('\\', "/"))
        .filter(|l| !l.is_empty())
        .collect())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn load_noise(root: &Path) -> Result<Vec<NoiseRecording>> {
    let dir = root.join(NOISE_DIR);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for path in sorted_entries(&dir)? {
        if path.extension().and_then(|e| e.to_str()) != Some("wav") {
            continue;
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let samples = parse_wav(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        out.push(NoiseRecording {
            name: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            samples: Arc::new(samples),
        });
    }
    Ok(out)
}

/// Loads the directory tree under `root`; files are visited in sorted order
/// and silence clips appended per split, so the result depends only on the
/// tree and `seed`.
pub fn load_dataset(root: &Path, mode: LabelMode, seed: u64) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Config(format!("dataset root {} is not a directory", root.display())));
    }
    let validation = read_list(root, VALIDATION_LIST)?;
    let testing = read_list(root, TESTING_LIST)?;
    let labels = LabelMap::new(mode);
    let mut splits: [Vec<Utterance>; 3] = Default::default();
    let mut keyword_dirs = 0;
    for dir in sorted_entries(root)? {
        if !dir.is_dir() {
            continue;
        }
        let keyword = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if keyword.starts_with('_') || keyword.starts_with('.') {
            continue;
        }
        let label = labels.index_of(&keyword)?;
        keyword_dirs += 1;
        for file in sorted_entries(&dir)? {
            if file.extension().and_then(|e| e.to_str()) != Some("wav") {
                continue;
            }
            let name = file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let rel = format!("{keyword}/{name}");
            let split = if testing.contains(&rel) {
                2
            } else if validation.contains(&rel) {
                1
            } else {
                0
            };
            splits[split].push(Utterance {
                source: UtteranceSource::File(file),
                label,
                source_path: rel,
            });
        }
    }
    if keyword_dirs == 0 {
        return Err(Error::Config(format!("no keyword directories under {}", root.display())));
    }
    let keyword_counts = [splits[0].len(), splits[1].len(), splits[2].len()];
    let mut silence_counts = [0; 3];
    if let Some(silence) = labels.silence {
        let noise = load_noise(root)?;
        for (i, split) in Split::ALL.iter().enumerate() {
            let count = silence_count(keyword_counts[i]);
            if count > 0 && noise.is_empty() {
                return Err(Error::Config(format!(
                    "silence class needs recordings in {}",
                    root.join(NOISE_DIR).display()
                )));
            }
            let clips = synthesize_silence(&noise, count, seed, *split, silence)?;
            silence_counts[i] = clips.len();
            splits[i].extend(clips);
        }
    }
    let [train, validation, test] = splits;
    Ok(Dataset {
        labels,
        train,
        validation,
        test,
        keyword_counts,
        silence_counts,
    })
}

/// Evenly spread subset with at most `per_class` utterances of each label.
pub fn balanced_subset(items: &[Utterance], classes: &[usize], per_class: usize) -> Vec<Utterance> {
    let mut by_class: BTreeMap<usize, Vec<&Utterance>> = BTreeMap::new();
    for u in items {
        if classes.contains(&u.label) {
            by_class.entry(u.label).or_default().push(u);
        }
    }
    let mut out = Vec::new();
    for list in by_class.values() {
        let take = per_class.min(list.len());
        for k in 0..take {
            out.push(list[k * list.len() / take].clone());
        }
    }
    out
}

pub const TONE_LOW_HZ: f64 = 600.0;
pub const TONE_HIGH_HZ: f64 = 1500.0;

/// Two-class task: one tone burst per clip at 600 Hz (label 0) or 1.5 kHz
/// (label 1) with random onset, duration and amplitude, plus Gaussian noise.
pub fn tone_task(n: usize, seed: u64) -> Vec<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).expect("valid deviation");
    let sr = SAMPLE_RATE as f64;
    (0..n)
        .map(|i| {
            let label = i % 2;
            let freq = if label == 0 { TONE_LOW_HZ } else { TONE_HIGH_HZ };
            let dur = (rng.gen_range(0.3..0.6) * sr) as usize;
            let start = rng.gen_range(0..CLIP_LEN - dur);
            let amp = rng.gen_range(0.3..0.8);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let ramp = (0.005 * sr) as usize;
            let samples: Vec<f32> = (0..CLIP_LEN)
                .map(|t| {
                    let mut v = noise.sample(&mut rng);
                    if (start..start + dur).contains(&t) {
                        let k = t - start;
                        let env = (k.min(dur - 1 - k) as f64 / ramp as f64).min(1.0);
                        v += amp * env * (std::f64::consts::TAU * freq * t as f64 / sr + phase).sin();
                    }
                    v.clamp(-1.0, 1.0) as f32
                })
                .collect();
            Utterance {
                source: UtteranceSource::Memory(Arc::new(samples)),
                label,
                source_path: format!("tone/{i:04}-{}hz", freq as u32),
            }
        })
        .collect()
}
