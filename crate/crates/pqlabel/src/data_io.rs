//! File formats: CIFAR-10 binary batches, label CSVs, model checkpoints and
//! the CSV exports written by the pipeline.

use std::fs;
use std::io::Write;
use std::path::Path;

use pqlabel_core::clustering::KMeansModel;
use pqlabel_core::model::{Classifier, ClassifierConfig, DuqConfig, DuqState, EpochLog};
use pqlabel_core::pool::{LabelFile, MultiLabelDataset, Provenance, TrainPair};
use pqlabel_core::quality::{QualityFeatures, ScoredSample, FEATURE_DIM};
use pqlabel_core::{RgbImage, Sample};

use crate::error::{Error, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::input(path, e))
}

/// Writes through a sibling temporary file so readers never see a partial
/// file.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::output(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::output(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::output(path, e))
}

// ---------------------------------------------------------------- CIFAR-10

/// Decodes the first `count` records of a CIFAR-10 binary batch.
pub fn decode_cifar10(bytes: &[u8], count: usize, classes: usize, origin: &str) -> Result<Vec<Sample>> {
    let whole = bytes.len() / CIFAR_RECORD;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::format(
            origin,
            format!("truncated record at byte offset {} ({} trailing bytes)", whole * CIFAR_RECORD, bytes.len() % CIFAR_RECORD),
        ));
    }
    if count > whole {
        return Err(Error::format(origin, format!("requested {count} records but the file holds {whole}")));
    }
    bytes
        .chunks_exact(CIFAR_RECORD)
        .take(count)
        .enumerate()
        .map(|(id, rec)| {
            let label = rec[0];
            if usize::from(label) >= classes {
                return Err(Error::format(
                    origin,
                    format!("label {label} at byte offset {} outside [0, {classes})", id * CIFAR_RECORD),
                ));
            }
            let image = RgbImage::new(CIFAR_SIDE, CIFAR_SIDE, rec[1..].to_vec())?;
            Ok(Sample::new(id, image, Some(label)))
        })
        .collect()
}

pub fn encode_cifar10(samples: &[Sample]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(samples.len() * CIFAR_RECORD);
    for s in samples {
        if s.image.height() != CIFAR_SIDE || s.image.width() != CIFAR_SIDE {
            return Err(Error::format(
                "CIFAR-10 encoder",
                format!("sample {} is {}x{}, the format fixes 32x32", s.id, s.image.height(), s.image.width()),
            ));
        }
        let label = s
            .clean_label
            .ok_or_else(|| Error::format("CIFAR-10 encoder", format!("sample {} has no label", s.id)))?;
        out.push(label);
        out.extend_from_slice(s.image.data());
    }
    Ok(out)
}

pub fn load_cifar10_binary(path: &Path, count: usize, classes: usize) -> Result<Vec<Sample>> {
    decode_cifar10(&read_file(path)?, count, classes, &path.display().to_string())
}

/// Reads `count` records spread over several batch files in order (every
/// file is read whole until the count is met); ids are renumbered densely.
pub fn load_cifar10_batches(paths: &[std::path::PathBuf], count: usize, classes: usize) -> Result<Vec<Sample>> {
    let mut out: Vec<Sample> = Vec::with_capacity(count);
    for path in paths {
        if out.len() == count {
            break;
        }
        let bytes = read_file(path)?;
        let available = bytes.len() / CIFAR_RECORD;
        let take = available.min(count - out.len());
        let offset = out.len();
        let batch = decode_cifar10(&bytes, take, classes, &path.display().to_string())?;
        out.extend(batch.into_iter().map(|s| Sample { id: s.id + offset, ..s }));
    }
    if out.len() < count {
        return Err(Error::format("CIFAR-10 batches", format!("requested {count} records, found {}", out.len())));
    }
    Ok(out)
}

pub fn write_cifar10_binary(path: &Path, samples: &[Sample]) -> Result<()> {
    write_file(path, &encode_cifar10(samples)?)
}

// ------------------------------------------------------------- label files

/// Parses `id,label1[,label2,...]` rows. Blank cells may only trail.
pub fn parse_label_csv(text: &str, classes: usize, origin: &str) -> Result<LabelFile> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::format(origin, e.to_string()))?.clone();
    let header_ok = header.get(0) == Some("id")
        && header.len() >= 2
        && header.iter().skip(1).enumerate().all(|(i, h)| h == format!("label{}", i + 1));
    if !header_ok {
        return Err(Error::format(origin, "header must be id,label1[,label2,...]"));
    }
    let mut file = LabelFile::new(classes);
    for record in reader.records() {
        let record = record.map_err(|e| Error::format(origin, e.to_string()))?;
        let row = record.position().map_or(0, |p| p.line());
        let bad = |m: String| Error::format(origin, format!("row {row}: {m}"));
        if record.len() > header.len() {
            return Err(bad(format!("{} cells but the header has {}", record.len(), header.len())));
        }
        let id: usize = record.get(0).unwrap_or("").parse().map_err(|_| bad("id is not a nonnegative integer".into()))?;
        let cells: Vec<&str> = record.iter().skip(1).collect();
        let filled = cells.iter().take_while(|c| !c.is_empty()).count();
        if cells[filled..].iter().any(|c| !c.is_empty()) {
            return Err(bad("blank label cell before a filled one".into()));
        }
        let labels = cells[..filled]
            .iter()
            .map(|c| match c.parse::<usize>() {
                Ok(l) if l < classes => Ok(l as u8),
                _ => Err(bad(format!("label {c:?} outside [0, {classes})"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        if labels.is_empty() {
            return Err(bad(format!("id {id} has no labels")));
        }
        if file.entries.contains_key(&id) {
            return Err(bad(format!("duplicate id {id}")));
        }
        file.insert(id, labels)?;
    }
    Ok(file)
}

pub fn load_label_file(path: &Path, classes: usize) -> Result<LabelFile> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::format(path.display().to_string(), "not UTF-8"))?;
    parse_label_csv(&text, classes, &path.display().to_string())
}

pub fn render_label_csv(file: &LabelFile, stamp: Option<&Stamp>) -> Result<String> {
    let width = file.entries.values().map(Vec::len).max().unwrap_or(1);
    let mut header = vec!["id".to_string()];
    header.extend((1..=width).map(|i| format!("label{i}")));
    let rows = file.entries.iter().map(|(id, ls)| {
        let mut row = vec![id.to_string()];
        row.extend((0..width).map(|i| ls.get(i).map_or(String::new(), u8::to_string)));
        row
    });
    render_csv(stamp, &header, rows)
}

// ------------------------------------------------------------- CSV exports

/// Traceability stamp written as the first line of every CSV output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stamp {
    pub digest: String,
    pub seeds: Vec<u64>,
}

impl Stamp {
    pub fn comment(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        format!("# config_digest={} seeds={}", self.digest, seeds.join(";"))
    }

    pub fn parse(line: &str) -> Option<Stamp> {
        let rest = line.strip_prefix("# config_digest=")?;
        let (digest, seeds) = rest.split_once(" seeds=")?;
        let seeds = if seeds.is_empty() {
            Vec::new()
        } else {
            seeds.split(';').map(str::parse).collect::<std::result::Result<_, _>>().ok()?
        };
        Some(Stamp { digest: digest.to_string(), seeds })
    }
}

pub fn render_csv<H, R, C>(stamp: Option<&Stamp>, header: &[H], rows: R) -> Result<String>
where
    H: AsRef<str>,
    R: IntoIterator<Item = Vec<C>>,
    C: AsRef<str>,
{
    let mut buf = Vec::new();
    if let Some(s) = stamp {
        writeln!(buf, "{}", s.comment()).expect("vec write");
    }
    {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(&mut buf);
        let csv_err = |e: csv::Error| Error::format("CSV writer", e.to_string());
        w.write_record(header.iter().map(AsRef::as_ref)).map_err(csv_err)?;
        for row in rows {
            w.write_record(row.iter().map(AsRef::as_ref)).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::format("CSV writer", e.to_string()))?;
    }
    Ok(String::from_utf8(buf).expect("CSV output is UTF-8"))
}

/// Parsed CSV: optional stamp, header and rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub stamp: Option<Stamp>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let stamp = text.lines().next().and_then(Stamp::parse);
        let mut reader =
            csv::ReaderBuilder::new().comment(Some(b'#')).flexible(true).from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| Error::format(origin, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = reader
            .records()
            .map(|r| {
                r.map(|r| r.iter().map(str::to_string).collect())
                    .map_err(|e| Error::format(origin, e.to_string()))
            })
            .collect::<Result<_>>()?;
        Ok(Self { stamp, header, rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::format(path.display().to_string(), "not UTF-8"))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// `id,score,f1..f36`; degenerate images have blank feature cells.
pub fn render_scores(scored: &[ScoredSample], stamp: Option<&Stamp>) -> Result<String> {
    let mut header = vec!["id".to_string(), "score".to_string()];
    header.extend((1..=FEATURE_DIM).map(|i| format!("f{i}")));
    let rows = scored.iter().map(|s| {
        let mut row = vec![s.id.to_string(), num(s.score)];
        match &s.features {
            Some(f) => row.extend(f.as_slice().iter().map(|&v| num(v))),
            None => row.extend(std::iter::repeat_n(String::new(), FEATURE_DIM)),
        }
        row
    });
    render_csv(stamp, &header, rows)
}

pub fn parse_scores(text: &str, origin: &str) -> Result<Vec<ScoredSample>> {
    let table = CsvTable::parse(text, origin)?;
    if table.header.len() != 2 + FEATURE_DIM || table.header[0] != "id" || table.header[1] != "score" {
        return Err(Error::format(origin, "header must be id,score,f1..f36"));
    }
    table
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let bad = |m: &str| Error::format(origin, format!("data row {}: {m}", i + 1));
            if row.len() != 2 + FEATURE_DIM {
                return Err(bad("wrong number of cells"));
            }
            let id = row[0].parse().map_err(|_| bad("bad id"))?;
            let score: f64 = row[1].parse().map_err(|_| bad("bad score"))?;
            let features = if row[2..].iter().all(String::is_empty) {
                None
            } else {
                let v = row[2..].iter().map(|c| c.parse::<f64>().map_err(|_| bad("bad feature"))).collect::<Result<Vec<_>>>()?;
                Some(QualityFeatures::from_slice(&v)?)
            };
            Ok(ScoredSample { id, score, features })
        })
        .collect()
}

/// One row per centroid: `centroid,class,x1..xd`.
pub fn render_kmeans(model: &KMeansModel, stamp: Option<&Stamp>) -> Result<String> {
    let mut header = vec!["centroid".to_string(), "class".to_string()];
    header.extend((1..=model.dim()).map(|i| format!("x{i}")));
    let rows = model.centroids.iter().enumerate().map(|(i, c)| {
        let class = model.centroid_class.as_ref().map_or(String::new(), |cc| cc[i].to_string());
        let mut row = vec![i.to_string(), class];
        row.extend(c.iter().map(|&v| num(v)));
        row
    });
    render_csv(stamp, &header, rows)
}

/// `id,cluster` assignments of a K-means fit.
pub fn render_assignments(assignments: &[usize], stamp: Option<&Stamp>) -> Result<String> {
    render_csv(stamp, &["id", "cluster"], assignments.iter().enumerate().map(|(id, c)| vec![id.to_string(), c.to_string()]))
}

/// `id,label,provenance`, one row per training pair.
pub fn render_pairs(pairs: &[TrainPair], mld: &MultiLabelDataset, stamp: Option<&Stamp>) -> Result<String> {
    let rows = pairs
        .iter()
        .map(|p| vec![p.id.to_string(), p.label.to_string(), mld.provenance[p.id].as_str().to_string()]);
    render_csv(stamp, &["id", "label", "provenance"], rows)
}

pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(usize, u8, Provenance)>> {
    let table = CsvTable::parse(text, origin)?;
    if table.header != ["id", "label", "provenance"] {
        return Err(Error::format(origin, "header must be id,label,provenance"));
    }
    table
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let bad = || Error::format(origin, format!("data row {}", i + 1));
            if r.len() != 3 {
                return Err(bad());
            }
            Ok((r[0].parse().map_err(|_| bad())?, r[1].parse().map_err(|_| bad())?, Provenance::parse(&r[2])?))
        })
        .collect()
}

/// `id,rank,score,num_labels` in ranking order; `rank` is 0-based.
pub fn render_manifest(
    ranking: &[usize],
    scores: &[f64],
    mld: &MultiLabelDataset,
    stamp: Option<&Stamp>,
) -> Result<String> {
    let rows = ranking.iter().enumerate().map(|(rank, &id)| {
        vec![id.to_string(), rank.to_string(), num(scores[id]), mld.labels[id].len().to_string()]
    });
    render_csv(stamp, &["id", "rank", "score", "num_labels"], rows)
}

pub fn render_train_log(log: &[EpochLog], stamp: Option<&Stamp>) -> Result<String> {
    let rows = log.iter().map(|e| vec![e.epoch.to_string(), num(e.loss), num(e.train_acc)]);
    render_csv(stamp, &["epoch", "loss", "train_acc"], rows)
}

// -------------------------------------------------------------- checkpoint

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PQLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Encoder(Vec<u8>);

impl Encoder {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&u32::try_from(v).expect("dimension fits in u32").to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Decoder<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Corrupt(format!("truncated at byte {} (needed {n} more of {})", self.pos, self.bytes.len()))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = usize::try_from(self.u64()?).map_err(|_| Error::Corrupt("length overflow".into()))?;
        if n > (self.bytes.len() - self.pos) / 8 {
            return Err(Error::Corrupt(format!("array of {n} values exceeds the remaining bytes")));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt("non-UTF-8 block name".into()))
    }
}

/// Little-endian layout: magic, version, config, DUQ settings, parameter
/// manifest (name, shape, offset per block), parameters, DUQ centroid state.
pub fn save_checkpoint(model: &Classifier) -> Result<Vec<u8>> {
    if let Some(i) = model.params().iter().position(|p| !p.is_finite()) {
        return Err(Error::Core(pqlabel_core::Error::Validation(format!("parameter {i} is not finite"))));
    }
    let mut e = Encoder(Vec::new());
    e.0.extend_from_slice(CHECKPOINT_MAGIC);
    e.u32(CHECKPOINT_VERSION as usize);
    let c = model.config();
    e.u32(c.channels);
    e.u32(c.height);
    e.u32(c.width);
    e.u32(c.conv_channels.len());
    for &k in &c.conv_channels {
        e.u32(k);
    }
    e.u32(c.dense_width);
    e.f64(c.dropout_p);
    e.u32(c.classes);
    e.u64(c.seed);
    match model.duq_state() {
        None => e.u8(0),
        Some(d) => {
            e.u8(1);
            e.u32(d.config.embedding);
            e.f64(d.config.length_scale);
            e.f64(d.config.momentum);
        }
    }
    e.u32(model.layout().len());
    for b in model.layout() {
        e.str(&b.name);
        e.u32(b.shape.len());
        for &d in &b.shape {
            e.u32(d);
        }
        e.u64(b.offset as u64);
    }
    e.f64s(model.params());
    if let Some(d) = model.duq_state() {
        e.f64s(&d.counts);
        e.f64s(&d.sums);
    }
    Ok(e.0)
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Classifier> {
    let mut d = Decoder { bytes, pos: 0 };
    if d.take(8).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Corrupt("missing checkpoint magic".into()));
    }
    let version = d.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Incompatible(format!("format version {version}, this build reads {CHECKPOINT_VERSION}")));
    }
    let (channels, height, width) = (d.u32()?, d.u32()?, d.u32()?);
    let n_conv = d.u32()?;
    if n_conv > 64 {
        return Err(Error::Corrupt(format!("{n_conv} conv blocks")));
    }
    let conv_channels = (0..n_conv).map(|_| d.u32()).collect::<Result<Vec<_>>>()?;
    let config = ClassifierConfig {
        channels,
        height,
        width,
        conv_channels,
        dense_width: d.u32()?,
        dropout_p: d.f64()?,
        classes: d.u32()?,
        seed: d.u64()?,
    };
    let duq = match d.u8()? {
        0 => None,
        1 => Some(DuqConfig { embedding: d.u32()?, length_scale: d.f64()?, momentum: d.f64()? }),
        t => return Err(Error::Corrupt(format!("unknown head tag {t}"))),
    };
    config.validate().map_err(|e| Error::Corrupt(format!("stored config invalid: {e}")))?;
    let expected = Classifier::layout_for(&config, duq.as_ref());
    let n_blocks = d.u32()?;
    if n_blocks != expected.len() {
        return Err(Error::Corrupt(format!("manifest lists {n_blocks} blocks, config implies {}", expected.len())));
    }
    for want in &expected {
        let name = d.str()?;
        let rank = d.u32()?;
        if rank > 8 {
            return Err(Error::Corrupt(format!("block {name} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| d.u32()).collect::<Result<Vec<_>>>()?;
        let offset = d.u64()? as usize;
        if name != want.name || shape != want.shape || offset != want.offset {
            return Err(Error::Corrupt(format!(
                "manifest entry {name} {shape:?}@{offset} does not match {} {:?}@{}",
                want.name, want.shape, want.offset
            )));
        }
    }
    let params = d.f64s()?;
    let state = match duq {
        None => None,
        Some(cfg) => Some(DuqState { config: cfg, counts: d.f64s()?, sums: d.f64s()? }),
    };
    if d.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - d.pos)));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Corrupt("non-finite parameter".into()));
    }
    Classifier::from_parts(config, params, state).map_err(|e| Error::Corrupt(e.to_string()))
}

pub fn write_checkpoint(path: &Path, model: &Classifier) -> Result<()> {
    write_file(path, &save_checkpoint(model)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Classifier> {
    load_checkpoint(&read_file(path)?).map_err(|e| e.context(path.display().to_string()))
}
