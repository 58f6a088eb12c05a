//! Synthetic tobacco-product corpus: taxonomy, annotation records and their
//! validator, procedural images, vocabulary/tokenizer and split manifest.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::decoder::{BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::imaging::Image;

pub const CATEGORIES: [&str; 3] = ["Combustible", "Non-Combustible", "Nicotine Replacement"];

/// (sub-category, category index). Generation takes a prefix of this list,
/// and the zero-shot classes are the last ones of that prefix.
pub const TAXONOMY: [(&str, usize); 10] = [
    ("Cigarettes", 0),
    ("E-cigarettes/Vapes", 1),
    ("Patches", 2),
    ("Cigars", 0),
    ("Smokeless Tobacco", 1),
    ("Lozenges", 2),
    ("Heated Tobacco", 1),
    ("Gums", 2),
    ("Pipe Tobacco", 0),
    ("Hookah/Shisha", 0),
];

pub const MIN_CLASSES: usize = 4;

pub fn sub_categories_of(category: &str) -> Vec<&'static str> {
    match CATEGORIES.iter().position(|c| *c == category) {
        Some(ci) => TAXONOMY.iter().filter(|(_, c)| *c == ci).map(|(s, _)| *s).collect(),
        None => Vec::new(),
    }
}

pub fn class_id_of(sub_category: &str) -> Option<usize> {
    TAXONOMY.iter().position(|(s, _)| *s == sub_category)
}

/// Number of held-out classes for `n` classes: a tenth, at least two.
pub fn num_zero_shot(n_classes: usize) -> usize {
    ((n_classes as f64 * 0.1).ceil() as usize).max(2)
}

// ---------------------------------------------------------------- records

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Severity {
    pub level: String,
    pub impact: String,
    pub visual_cues: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationLabel {
    #[serde(rename = "type")]
    pub kind: String,
    pub effects: Vec<String>,
    pub visual_indicators: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthImpactLabels {
    pub severity: Vec<Severity>,
    pub duration: Vec<DurationLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cue {
    #[serde(rename = "type")]
    pub kind: String,
    pub visual_cues: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageContext {
    pub settings: Vec<Cue>,
    pub regulatory_zones: Vec<Cue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Element {
    #[serde(rename = "type")]
    pub kind: String,
    pub visual_elements: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentPurpose {
    pub marketing: Vec<Element>,
    pub regulatory: Vec<Element>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Indicators {
    pub litter: Vec<String>,
    pub pollution: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentalImpact {
    #[serde(rename = "type")]
    pub kind: String,
    pub description: String,
    pub visual_indicators: Indicators,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub query: String,
    #[serde(rename = "imageUrl")]
    pub image_url: String,
    pub image_id: String,
    pub category: String,
    #[serde(rename = "sub-category")]
    pub sub_category: String,
    pub health_impact_labels: HealthImpactLabels,
    pub usage_context: UsageContext,
    pub content_purpose: ContentPurpose,
    pub environmental_impact: EnvironmentalImpact,
}

// -------------------------------------------------------------- validator

enum Shape {
    Str,
    StrList,
    /// List of objects with these fields.
    Objects(&'static [(&'static str, Shape)]),
    Object(&'static [(&'static str, Shape)]),
}

const SEVERITY: &[(&str, Shape)] = &[("level", Shape::Str), ("impact", Shape::Str), ("visual_cues", Shape::StrList)];
const DURATION: &[(&str, Shape)] =
    &[("type", Shape::Str), ("effects", Shape::StrList), ("visual_indicators", Shape::StrList)];
const CUE: &[(&str, Shape)] = &[("type", Shape::Str), ("visual_cues", Shape::StrList)];
const ELEMENT: &[(&str, Shape)] = &[("type", Shape::Str), ("visual_elements", Shape::StrList)];
const INDICATORS: &[(&str, Shape)] = &[("litter", Shape::StrList), ("pollution", Shape::StrList)];

const SCHEMA: &[(&str, Shape)] = &[
    ("query", Shape::Str),
    ("imageUrl", Shape::Str),
    ("image_id", Shape::Str),
    ("category", Shape::Str),
    ("sub-category", Shape::Str),
    ("health_impact_labels", Shape::Object(&[("severity", Shape::Objects(SEVERITY)), ("duration", Shape::Objects(DURATION))])),
    ("usage_context", Shape::Object(&[("settings", Shape::Objects(CUE)), ("regulatory_zones", Shape::Objects(CUE))])),
    ("content_purpose", Shape::Object(&[("marketing", Shape::Objects(ELEMENT)), ("regulatory", Shape::Objects(ELEMENT))])),
    (
        "environmental_impact",
        Shape::Object(&[("type", Shape::Str), ("description", Shape::Str), ("visual_indicators", Shape::Object(INDICATORS))]),
    ),
];

fn check_fields(obj: &serde_json::Map<String, Value>, fields: &[(&str, Shape)], prefix: &str, errors: &mut Vec<String>) {
    for (name, shape) in fields {
        let path = if prefix.is_empty() { name.to_string() } else { format!("{prefix}.{name}") };
        match obj.get(*name) {
            None => errors.push(format!("missing field: {path}")),
            Some(v) => check_value(v, shape, &path, errors),
        }
    }
}

fn check_value(v: &Value, shape: &Shape, path: &str, errors: &mut Vec<String>) {
    match shape {
        Shape::Str if !v.is_string() => errors.push(format!("wrong type: {path} (expected string)")),
        Shape::Str => {}
        Shape::StrList => match v.as_array() {
            Some(items) => {
                for (i, item) in items.iter().enumerate() {
                    if !item.is_string() {
                        errors.push(format!("wrong type: {path}[{i}] (expected string)"));
                    }
                }
            }
            None => errors.push(format!("wrong type: {path} (expected list of strings)")),
        },
        Shape::Objects(fields) => match v.as_array() {
            Some(items) => {
                for (i, item) in items.iter().enumerate() {
                    match item.as_object() {
                        Some(o) => check_fields(o, fields, &format!("{path}[{i}]"), errors),
                        None => errors.push(format!("wrong type: {path}[{i}] (expected object)")),
                    }
                }
            }
            None => errors.push(format!("wrong type: {path} (expected list)")),
        },
        Shape::Object(fields) => match v.as_object() {
            Some(o) => check_fields(o, fields, path, errors),
            None => errors.push(format!("wrong type: {path} (expected object)")),
        },
    }
}

/// Checks a parsed JSON value against the annotation schema and taxonomy,
/// reporting every violation found.
pub fn validate_record(v: &Value) -> std::result::Result<AnnotationRecord, Vec<String>> {
    let Some(obj) = v.as_object() else {
        return Err(vec!["wrong type: record (expected object)".into()]);
    };
    let mut errors = Vec::new();
    check_fields(obj, SCHEMA, "", &mut errors);
    let category = obj.get("category").and_then(Value::as_str);
    if let Some(c) = category {
        if !CATEGORIES.contains(&c) {
            errors.push(format!("invalid category: {c:?} (allowed: {})", CATEGORIES.join(", ")));
        }
    }
    if let (Some(c), Some(s)) = (category, obj.get("sub-category").and_then(Value::as_str)) {
        let allowed = sub_categories_of(c);
        if !allowed.is_empty() && !allowed.contains(&s) {
            errors.push(format!("invalid sub-category: {s:?} for category {c:?} (allowed: {})", allowed.join(", ")));
        }
    }
    if !errors.is_empty() {
        return Err(errors);
    }
    serde_json::from_value(v.clone()).map_err(|e| vec![format!("malformed record: {e}")])
}

/// Validates every line of a JSON-lines file; returns (line number, errors) for failures.
pub fn validate_file(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let f = fs::File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut failures = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Value>(&line) {
            Ok(v) => {
                if let Err(e) = validate_record(&v) {
                    failures.push((i + 1, e));
                }
            }
            Err(e) => failures.push((i + 1, vec![format!("invalid JSON: {e}")])),
        }
    }
    Ok(failures)
}

// ----------------------------------------------------------- class styles

#[derive(Debug, Clone, Copy, PartialEq)]
enum Form {
    Pack,
    Cylinder,
    Tin,
    Vase,
    Slim,
    Stick,
    Square,
    Blister,
    Pellets,
    Pouch,
}

struct ClassStyle {
    form: Form,
    accent: [f64; 3],
    /// Vertical position of the warning band within the product, in [0, 1].
    band_at: f64,
    tobacco: bool,
    shape_words: &'static str,
    band_words: &'static str,
    setting: &'static str,
    marketing: &'static str,
    severity: &'static str,
}

fn style(class_id: usize) -> ClassStyle {
    let s = |form, accent, band_at, tobacco, shape_words, band_words, setting, marketing, severity| ClassStyle {
        form,
        accent,
        band_at,
        tobacco,
        shape_words,
        band_words,
        setting,
        marketing,
        severity,
    };
    match class_id {
        0 => s(Form::Pack, [0.95, 0.95, 0.9], 0.85, false, "a tall box pack", "bottom", "convenience stores", "bold logo", "high"),
        1 => s(Form::Slim, [0.75, 0.75, 0.8], 0.3, false, "a slim pen device", "top", "social events", "flavor names", "moderate"),
        2 => s(Form::Square, [0.95, 0.95, 0.95], 0.5, false, "a flat square sheet", "middle", "pharmacy shelves", "clinical label", "low"),
        3 => s(Form::Cylinder, [0.45, 0.25, 0.1], 0.5, false, "a long rolled cylinder", "middle", "lounges", "premium band", "high"),
        4 => s(Form::Tin, [0.8, 0.8, 0.85], 0.2, true, "a round tin with tobacco", "top", "outdoor work", "sport imagery", "high"),
        5 => s(Form::Pellets, [0.95, 0.95, 0.8], 0.8, false, "small round pellets", "bottom", "pharmacy shelves", "mint flavor", "low"),
        6 => s(Form::Stick, [0.9, 0.9, 0.9], 0.75, true, "a compact holder with tobacco sticks", "bottom", "social events", "tech design", "moderate"),
        7 => s(Form::Blister, [0.9, 0.95, 0.95], 0.15, false, "a blister card of pieces", "top", "pharmacy shelves", "fruit flavor", "low"),
        8 => s(Form::Pouch, [0.5, 0.3, 0.15], 0.5, true, "a soft pouch of loose tobacco", "middle", "lounges", "vintage art", "high"),
        _ => s(Form::Vase, [0.7, 0.6, 0.3], 0.35, false, "a tall water pipe", "top", "lounges", "flavor names", "high"),
    }
}

fn category_color(category: usize) -> [f64; 3] {
    match category {
        0 => [0.78, 0.18, 0.14],
        1 => [0.16, 0.34, 0.78],
        _ => [0.18, 0.68, 0.34],
    }
}

const TOBACCO_BROWN: [f64; 3] = [0.42, 0.27, 0.12];

fn phrase(s: &str) -> String {
    s.to_lowercase()
}

/// Text-encoder input for a class: category plus sub-category phrase.
pub fn prompt_text(sub_category: &str, category: &str) -> String {
    format!("a photo of a {} product , a {} product", phrase(sub_category), phrase(category))
}

/// Zero-shot prompt for a class.
pub fn class_prompt(sub_category: &str) -> String {
    format!("a photo of a {} product", phrase(sub_category))
}

/// Decoder target built from the record fields.
pub fn description_text(r: &AnnotationRecord) -> String {
    let shape = r.content_purpose.marketing.first().and_then(|m| m.visual_elements.first()).map_or("", String::as_str);
    let band = r.content_purpose.regulatory.first().and_then(|m| m.visual_elements.first()).map_or("", String::as_str);
    let setting = r.usage_context.settings.first().map_or("", |s| s.kind.as_str());
    format!(
        "{} , a {} product . {} with a warning band at the {} . seen in {} .",
        phrase(&r.sub_category),
        phrase(&r.category),
        shape,
        band,
        setting
    )
}

fn record_for(class_id: usize, image_id: &str) -> AnnotationRecord {
    let (sub, ci) = TAXONOMY[class_id];
    let st = style(class_id);
    let strs = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    AnnotationRecord {
        query: phrase(sub),
        image_url: format!("images/{image_id}.png"),
        image_id: image_id.to_string(),
        category: CATEGORIES[ci].to_string(),
        sub_category: sub.to_string(),
        health_impact_labels: HealthImpactLabels {
            severity: vec![Severity {
                level: st.severity.to_string(),
                impact: "nicotine dependence".into(),
                visual_cues: strs(&["warning band"]),
            }],
            duration: vec![DurationLabel {
                kind: if ci == 2 { "short-term".into() } else { "long-term".into() },
                effects: strs(&["addiction"]),
                visual_indicators: strs(&["product packaging"]),
            }],
        },
        usage_context: UsageContext {
            settings: vec![Cue { kind: st.setting.to_string(), visual_cues: strs(&[st.shape_words]) }],
            regulatory_zones: vec![Cue { kind: "age restricted".into(), visual_cues: strs(&["warning band"]) }],
        },
        content_purpose: ContentPurpose {
            marketing: vec![Element { kind: st.marketing.to_string(), visual_elements: strs(&[st.shape_words]) }],
            regulatory: vec![Element { kind: "health warning".into(), visual_elements: strs(&[st.band_words]) }],
        },
        environmental_impact: EnvironmentalImpact {
            kind: if ci == 0 { "litter".into() } else { "plastic waste".into() },
            description: format!("discarded {} packaging", phrase(sub)),
            visual_indicators: Indicators { litter: strs(&["packaging"]), pollution: Vec::new() },
        },
    }
}

// ---------------------------------------------------------------- drawing

struct Canvas {
    img: Image,
}

impl Canvas {
    fn put(&mut self, y: isize, x: isize, c: [f64; 3]) {
        if y >= 0 && x >= 0 && (y as usize) < self.img.height && (x as usize) < self.img.width {
            self.img.set(y as usize, x as usize, c);
        }
    }

    fn fill(&mut self, y0: f64, x0: f64, h: f64, w: f64, c: [f64; 3], inside: impl Fn(f64, f64) -> bool) {
        for y in y0.floor() as isize..(y0 + h).ceil() as isize {
            for x in x0.floor() as isize..(x0 + w).ceil() as isize {
                // normalised coordinates in [-1, 1] within the box
                let u = ((x as f64 + 0.5) - x0) / w * 2.0 - 1.0;
                let v = ((y as f64 + 0.5) - y0) / h * 2.0 - 1.0;
                if inside(u, v) {
                    self.put(y, x, c);
                }
            }
        }
    }

    fn rect(&mut self, y0: f64, x0: f64, h: f64, w: f64, c: [f64; 3]) {
        self.fill(y0, x0, h, w, c, |u, v| u.abs() <= 1.0 && v.abs() <= 1.0);
    }

    fn ellipse(&mut self, y0: f64, x0: f64, h: f64, w: f64, c: [f64; 3]) {
        self.fill(y0, x0, h, w, c, |u, v| u * u + v * v <= 1.0);
    }

    fn rounded(&mut self, y0: f64, x0: f64, h: f64, w: f64, c: [f64; 3]) {
        let r = 0.35;
        self.fill(y0, x0, h, w, c, move |u, v| {
            let (ku, kv) = (r * h.min(w) / w, r * h.min(w) / h);
            let du = (u.abs() - (1.0 - ku)).max(0.0) / ku;
            let dv = (v.abs() - (1.0 - kv)).max(0.0) / kv;
            u.abs() <= 1.0 && v.abs() <= 1.0 && du * du + dv * dv <= 1.0
        });
    }
}

fn jitter<R: Rng>(c: [f64; 3], amount: f64, rng: &mut R) -> [f64; 3] {
    c.map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

/// Product bounding box (y, x, h, w) of the drawn body, for the band.
fn draw_product<R: Rng>(cv: &mut Canvas, class_id: usize, s: f64, rng: &mut R) -> (f64, f64, f64, f64) {
    let st = style(class_id);
    let base = jitter(category_color(TAXONOMY[class_id].1), 0.06, rng);
    let accent = jitter(st.accent, 0.05, rng);
    let scale = rng.random_range(0.9..1.1);
    let (cy, cx) = (s * 0.5 + rng.random_range(-0.08..0.08) * s, s * 0.5 + rng.random_range(-0.08..0.08) * s);
    let dims = |h: f64, w: f64| (h * s * scale, w * s * scale);
    let place = |h: f64, w: f64| (cy - h / 2.0, cx - w / 2.0, h, w);
    match st.form {
        Form::Pack => {
            let (h, w) = dims(0.55, 0.38);
            let (y, x, h, w) = place(h, w);
            cv.rect(y, x, h, w, base);
            cv.rect(y, x, h * 0.28, w, accent);
            (y, x, h, w)
        }
        Form::Slim => {
            let (h, w) = dims(0.62, 0.14);
            let (y, x, h, w) = place(h, w);
            cv.rounded(y, x, h, w, base);
            cv.rect(y - h * 0.12, x + w * 0.3, h * 0.14, w * 0.4, accent);
            (y, x, h, w)
        }
        Form::Square => {
            let (h, w) = dims(0.45, 0.45);
            let (y, x, h, w) = place(h, w);
            cv.rounded(y, x, h, w, accent);
            cv.rounded(y + h * 0.15, x + w * 0.15, h * 0.7, w * 0.7, base);
            (y, x, h, w)
        }
        Form::Cylinder => {
            let (h, w) = dims(0.2, 0.7);
            let (y, x, h, w) = place(h, w);
            cv.rounded(y, x, h, w, accent);
            cv.rect(y, x + w * 0.6, h, w * 0.15, base);
            (y, x, h, w)
        }
        Form::Tin => {
            let (h, w) = dims(0.5, 0.5);
            let (y, x, h, w) = place(h, w);
            cv.ellipse(y, x, h, w, base);
            cv.ellipse(y + h * 0.2, x + w * 0.2, h * 0.6, w * 0.6, accent);
            (y, x, h, w)
        }
        Form::Pellets => {
            let (h, w) = dims(0.5, 0.5);
            let (y, x, h, w) = place(h, w);
            cv.rect(y, x, h, w, base);
            for i in 0..3 {
                for j in 0..3 {
                    let (py, px) = (y + h * (0.1 + 0.28 * i as f64), x + w * (0.1 + 0.28 * j as f64));
                    cv.ellipse(py, px, h * 0.22, w * 0.22, accent);
                }
            }
            (y, x, h, w)
        }
        Form::Stick => {
            let (h, w) = dims(0.5, 0.22);
            let (y, x, h, w) = place(h, w);
            cv.rounded(y, x, h, w, base);
            cv.rect(y - h * 0.2, x + w * 0.25, h * 0.22, w * 0.5, accent);
            (y, x, h, w)
        }
        Form::Blister => {
            let (h, w) = dims(0.42, 0.55);
            let (y, x, h, w) = place(h, w);
            cv.rect(y, x, h, w, base);
            for i in 0..2 {
                for j in 0..4 {
                    let (py, px) = (y + h * (0.3 + 0.35 * i as f64), x + w * (0.06 + 0.235 * j as f64));
                    cv.rect(py, px, h * 0.25, w * 0.17, accent);
                }
            }
            (y, x, h, w)
        }
        Form::Pouch => {
            let (h, w) = dims(0.5, 0.42);
            let (y, x, h, w) = place(h, w);
            cv.rounded(y, x, h, w, base);
            cv.rect(y, x + w * 0.1, h * 0.12, w * 0.8, accent);
            (y, x, h, w)
        }
        Form::Vase => {
            let (h, w) = dims(0.62, 0.36);
            let (y, x, h, w) = place(h, w);
            cv.ellipse(y + h * 0.45, x, h * 0.55, w, base);
            cv.rect(y, x + w * 0.4, h * 0.5, w * 0.2, accent);
            (y, x, h, w)
        }
    }
}

fn draw_tobacco<R: Rng>(cv: &mut Canvas, bbox: (f64, f64, f64, f64), rng: &mut R) {
    let (y, x, h, w) = bbox;
    let n = ((h * w) / 6.0) as usize;
    for _ in 0..n {
        let py = y + h * rng.random_range(0.35..0.95);
        let px = x + w * rng.random_range(0.1..0.9);
        let c = jitter(TOBACCO_BROWN, 0.05, rng);
        cv.put(py as isize, px as isize, c);
        cv.put(py as isize, px as isize + 1, c);
    }
}

/// White band with dark vertical strokes standing in for printed text.
fn draw_band<R: Rng>(cv: &mut Canvas, bbox: (f64, f64, f64, f64), at: f64, s: f64, rng: &mut R) -> (f64, f64) {
    let (y, x, h, w) = bbox;
    let bh = (s * 0.14).max(4.0).round();
    let by = (y + (h - bh) * at).round();
    let (bx, bw) = ((x - s * 0.04).round(), (w + s * 0.08).round());
    cv.rect(by, bx, bh, bw, [0.97, 0.97, 0.97]);
    let mut px = bx as isize + 1 + rng.random_range(0..2i32) as isize;
    while ((px + 1) as f64) < bx + bw - 1.0 {
        for dx in 0..2 {
            for py in (by as isize + 1)..(by + bh) as isize - 1 {
                cv.put(py, px + dx, [0.08, 0.08, 0.08]);
            }
        }
        px += 4;
    }
    (by, bh)
}

fn background<R: Rng>(s: usize, rng: &mut R) -> Canvas {
    let tint = rng.random_range(0.55..0.8);
    let warm = rng.random_range(-0.04..0.04);
    let amp = rng.random_range(0.05..0.08);
    let phase = rng.random_range(0..4usize);
    // Woven surface: vertical threads, occasional horizontal seams.
    let img = Image::from_fn(s, s, |y, x| {
        let thread = if (x + phase) % 4 < 2 { amp } else { -amp };
        let seam = if y % 16 == 0 { -0.1 } else { 0.0 };
        let v = tint + thread + seam;
        [v + warm, v, v - warm]
    });
    Canvas { img }
}

/// Renders one sample image of `class_id` (S×S).
pub fn render_image(class_id: usize, size: usize, rng: &mut ChaCha8Rng) -> Image {
    render_with_band(class_id, size, rng).0
}

/// Image plus the warning band box (row0, row1, col0, col1).
pub fn render_with_band(class_id: usize, size: usize, rng: &mut ChaCha8Rng) -> (Image, (usize, usize, usize, usize)) {
    let s = size as f64;
    let mut cv = background(size, rng);
    let bbox = draw_product(&mut cv, class_id, s, rng);
    let st = style(class_id);
    if st.tobacco {
        draw_tobacco(&mut cv, bbox, rng);
    }
    let at = (st.band_at + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
    let (by, bh) = draw_band(&mut cv, bbox, at, s, rng);
    for v in &mut cv.img.data {
        *v += rng.random_range(-0.01..0.01);
    }
    cv.img.clamp_unit();
    cv.img.quantize_u8();
    let (x, w) = ((bbox.1 - s * 0.04).round(), (bbox.3 + s * 0.08).round());
    let clip = |v: f64| v.clamp(0.0, s) as usize;
    (cv.img, (clip(by), clip(by + bh), clip(x), clip(x + w)))
}

// ---------------------------------------------------------------- dataset

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: Image,
    pub record: AnnotationRecord,
    pub prompt_text: String,
    pub description_text: String,
    pub class_id: usize,
    /// Warning band box (row0, row1, col0, col1), pixel units, half-open.
    pub band: Option<(usize, usize, usize, usize)>,
}

impl SyntheticSample {
    pub fn from_record(record: AnnotationRecord, image: Image) -> Result<Self> {
        let class_id = class_id_of(&record.sub_category)
            .ok_or_else(|| Error::Data(format!("unknown sub-category {:?}", record.sub_category)))?;
        Ok(Self {
            prompt_text: prompt_text(&record.sub_category, &record.category),
            description_text: description_text(&record),
            image,
            record,
            class_id,
            band: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub zeroshot: Vec<String>,
    /// Class ids never seen in training.
    pub zeroshot_classes: Vec<usize>,
    pub num_classes: usize,
}

impl SplitManifest {
    /// Checks disjointness of ids and of train/zero-shot classes.
    pub fn audit(&self, samples: &[SyntheticSample]) -> Result<()> {
        let mut seen = HashMap::new();
        for (name, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test), ("zeroshot", &self.zeroshot)] {
            for id in ids {
                if let Some(prev) = seen.insert(id.as_str(), name) {
                    return Err(Error::Data(format!("image {id} is in both {prev} and {name}")));
                }
            }
        }
        let class_of: HashMap<&str, usize> = samples.iter().map(|s| (s.record.image_id.as_str(), s.class_id)).collect();
        for id in &self.train {
            match class_of.get(id.as_str()) {
                Some(c) if self.zeroshot_classes.contains(c) => {
                    return Err(Error::Data(format!("zero-shot class {c} appears in train ({id})")))
                }
                None => return Err(Error::Data(format!("train id {id} has no record"))),
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_classes: 8, n_per_class: 60, image_size: 64, seed: 7 }
    }
}

impl DataConfig {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if self.n_classes < MIN_CLASSES {
            return Err(Error::Config(format!("n_classes must be at least {MIN_CLASSES}, got {}", self.n_classes)));
        }
        if self.n_classes > TAXONOMY.len() {
            return Err(Error::Config(format!(
                "n_classes must be at most {} (taxonomy size), got {}",
                TAXONOMY.len(),
                self.n_classes
            )));
        }
        if self.n_per_class == 0 {
            return Err(Error::Config("n_per_class must be positive".into()));
        }
        if patch_size == 0 || self.image_size < 16 || !self.image_size.is_multiple_of(patch_size) {
            return Err(Error::Config(format!(
                "image_size {} must be at least 16 and divisible by patch_size {patch_size}",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// SplitMix64 finaliser over a sequence of parts; used for every derived seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

pub fn image_id(index: usize) -> String {
    format!("img_{index:05}")
}

pub fn generate_synthetic_dataset(cfg: &DataConfig, patch_size: usize) -> Result<(Vec<SyntheticSample>, SplitManifest)> {
    cfg.validate(patch_size)?;
    let mut samples = Vec::with_capacity(cfg.n_classes * cfg.n_per_class);
    for class_id in 0..cfg.n_classes {
        for i in 0..cfg.n_per_class {
            let id = image_id(samples.len());
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, class_id as u64, i as u64]));
            let (image, band) = render_with_band(class_id, cfg.image_size, &mut rng);
            let mut s = SyntheticSample::from_record(record_for(class_id, &id), image)?;
            s.band = Some(band);
            samples.push(s);
        }
    }
    let n_zs = num_zero_shot(cfg.n_classes);
    let zeroshot_classes: Vec<usize> = (cfg.n_classes - n_zs..cfg.n_classes).collect();
    let mut m = SplitManifest { zeroshot_classes: zeroshot_classes.clone(), num_classes: cfg.n_classes, ..Default::default() };
    let mut split_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0x5711]));
    for class_id in 0..cfg.n_classes {
        let mut ids: Vec<String> =
            samples.iter().filter(|s| s.class_id == class_id).map(|s| s.record.image_id.clone()).collect();
        if zeroshot_classes.contains(&class_id) {
            m.zeroshot.extend(ids);
            continue;
        }
        ids.shuffle(&mut split_rng);
        let n_hold = ((ids.len() as f64) / 9.0).round() as usize;
        let test = ids.split_off(ids.len() - n_hold);
        let val = ids.split_off(ids.len() - n_hold);
        m.train.extend(ids);
        m.val.extend(val);
        m.test.extend(test);
    }
    for list in [&mut m.train, &mut m.val, &mut m.test, &mut m.zeroshot] {
        list.sort();
    }
    Ok((samples, m))
}

pub fn write_dataset(dir: &Path, samples: &[SyntheticSample], manifest: &SplitManifest) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::Data(format!("cannot create {}: {e}", images.display())))?;
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, &s.record)?;
        out.push(b'\n');
        s.image.save_png(&images.join(format!("{}.png", s.record.image_id)))?;
    }
    fs::File::create(dir.join("dataset.jsonl"))?.write_all(&out)?;
    fs::write(dir.join("splits.json"), serde_json::to_string_pretty(manifest)?)?;
    let bands: BTreeMap<&str, (usize, usize, usize, usize)> =
        samples.iter().filter_map(|s| s.band.map(|b| (s.record.image_id.as_str(), b))).collect();
    fs::write(dir.join("bands.json"), serde_json::to_string(&bands)?)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<SyntheticSample>,
    pub manifest: SplitManifest,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(samples: Vec<SyntheticSample>, manifest: SplitManifest) -> Result<Self> {
        let index = samples.iter().enumerate().map(|(i, s)| (s.record.image_id.clone(), i)).collect();
        let d = Self { samples, manifest, index };
        d.manifest.audit(&d.samples)?;
        Ok(d)
    }

    pub fn get(&self, id: &str) -> Option<&SyntheticSample> {
        self.index.get(id).map(|&i| &self.samples[i])
    }

    pub fn split(&self, ids: &[String]) -> Result<Vec<&SyntheticSample>> {
        ids.iter()
            .map(|id| self.get(id).ok_or_else(|| Error::Data(format!("split references unknown image {id}"))))
            .collect()
    }

    /// Human-readable range of valid ids for error messages.
    pub fn id_range(&self) -> String {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => format!("{}..{}", a.record.image_id, b.record.image_id),
            _ => "(empty dataset)".into(),
        }
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("dataset.jsonl");
    let f = fs::File::open(&path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let record = validate_record(&v)
            .map_err(|e| Error::Data(format!("{}:{}: {}", path.display(), i + 1, e.join("; "))))?;
        let image = Image::load_png(&dir.join(format!("images/{}.png", record.image_id)))?;
        samples.push(SyntheticSample::from_record(record, image)?);
    }
    let splits = dir.join("splits.json");
    let text = fs::read_to_string(&splits).map_err(|e| Error::Data(format!("cannot read {}: {e}", splits.display())))?;
    let manifest: SplitManifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", splits.display())))?;
    // Band boxes are optional side information used by attention checks.
    let bands_path = dir.join("bands.json");
    if bands_path.exists() {
        let text = fs::read_to_string(&bands_path)?;
        let bands: BTreeMap<String, (usize, usize, usize, usize)> =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", bands_path.display())))?;
        for s in &mut samples {
            s.band = bands.get(&s.record.image_id).copied();
        }
    }
    Dataset::new(samples, manifest)
}

// -------------------------------------------------------- vocab/tokenizer

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        words(text).map(|w| self.id(&w)).collect()
    }

    /// Joins the words of `ids`, stopping at EOS and skipping PAD/BOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.tokens.get(i).map_or(RESERVED[UNK], String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

pub fn build_vocab<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Precondition("vocabulary corpus is empty".into()));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for line in corpus {
        for w in words(line.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(w, c)| *c >= min_freq.max(1) && !RESERVED.contains(&w.as_str())).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = RESERVED.iter().map(|s| s.to_string()).chain(ranked.into_iter().map(|(w, _)| w)).collect();
    Ok(Vocab::from_tokens(tokens))
}

/// `[BOS, words…, EOS, PAD…]` of exactly `max_len` ids (`max_len ≥ 2`).
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Vec<usize> {
    let max_len = max_len.max(2);
    let mut ids = vec![BOS];
    ids.extend(vocab.encode(text).into_iter().take(max_len - 2));
    ids.push(EOS);
    ids.resize(max_len, PAD);
    ids
}

/// Drops trailing PAD ids.
pub fn strip_padding(ids: &[usize]) -> &[usize] {
    let end = ids.iter().rposition(|&i| i != PAD).map_or(0, |p| p + 1);
    &ids[..end]
}

/// Pixel-mean nearest-centroid baseline: per-patch mean colour features.
pub fn pixel_mean_features(img: &Image, cell: usize) -> Vec<f64> {
    let (gh, gw) = (img.height / cell, img.width / cell);
    let mut f = vec![0.0; gh * gw * 3];
    for y in 0..gh * cell {
        for x in 0..gw * cell {
            let p = img.get(y, x);
            let k = ((y / cell) * gw + x / cell) * 3;
            for c in 0..3 {
                f[k + c] += p[c] / (cell * cell) as f64;
            }
        }
    }
    f
}

/// Accuracy of nearest class centroid on `test`, centroids from `train`.
pub fn nearest_centroid_accuracy(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)]) -> f64 {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (f, c) in train {
        let e = sums.entry(*c).or_insert_with(|| (vec![0.0; f.len()], 0));
        for (a, b) in e.0.iter_mut().zip(f) {
            *a += b;
        }
        e.1 += 1;
    }
    let centroids: Vec<(usize, Vec<f64>)> =
        sums.into_iter().map(|(c, (s, n))| (c, s.into_iter().map(|v| v / n as f64).collect())).collect();
    let correct = test
        .iter()
        .filter(|(f, label)| {
            let best = centroids
                .iter()
                .map(|(c, m)| (c, f.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(c, _)| *c);
            best == Some(*label)
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::{PatchSet, SamplerConfig};

    fn small() -> (Vec<SyntheticSample>, SplitManifest) {
        generate_synthetic_dataset(&DataConfig { n_classes: 8, n_per_class: 6, image_size: 64, seed: 3 }, 8).unwrap()
    }

    #[test]
    fn counts_and_zero_shot_classes() {
        let (s, m) = generate_synthetic_dataset(&DataConfig { n_classes: 8, n_per_class: 60, image_size: 32, seed: 7 }, 8).unwrap();
        assert_eq!(s.len(), 480);
        assert!(!m.zeroshot_classes.is_empty());
        assert_eq!(m.zeroshot_classes, vec![6, 7]);
        let total = m.train.len() + m.val.len() + m.test.len() + m.zeroshot.len();
        assert_eq!(total, 480);
        assert_eq!(m.zeroshot.len(), 120);
        m.audit(&s).unwrap();
        for c in [3, 4, 8, 10] {
            assert!(num_zero_shot(c) >= 1 && num_zero_shot(c) < c);
        }
    }

    #[test]
    fn invalid_sizes_are_config_errors() {
        for cfg in [
            DataConfig { n_classes: 2, ..Default::default() },
            DataConfig { n_classes: 11, ..Default::default() },
            DataConfig { image_size: 60, ..Default::default() },
        ] {
            assert!(matches!(generate_synthetic_dataset(&cfg, 8), Err(Error::Config(_))));
        }
    }

    #[test]
    fn regeneration_is_pixel_identical() {
        let (a, ma) = small();
        let (b, mb) = small();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        let (c, _) = generate_synthetic_dataset(&DataConfig { n_classes: 8, n_per_class: 6, image_size: 64, seed: 4 }, 8).unwrap();
        assert_ne!(a[0].image, c[0].image);
    }

    #[test]
    fn generated_records_validate() {
        let (s, _) = small();
        for sample in &s {
            let v = serde_json::to_value(&sample.record).unwrap();
            assert_eq!(validate_record(&v).unwrap(), sample.record);
            assert_ne!(sample.prompt_text, sample.description_text);
            assert_eq!(class_id_of(&sample.record.sub_category), Some(sample.class_id));
        }
    }

    #[test]
    fn schema_keys_are_exact() {
        let (s, _) = small();
        let v = serde_json::to_value(&s[0].record).unwrap();
        let o = v.as_object().unwrap();
        for k in ["query", "imageUrl", "image_id", "category", "sub-category", "health_impact_labels"] {
            assert!(o.contains_key(k), "{k}");
        }
    }

    fn base() -> Value {
        serde_json::to_value(record_for(0, "img_00000")).unwrap()
    }

    #[test]
    fn malformed_records_report_every_error() {
        let mut v = base();
        v.as_object_mut().unwrap().remove("category");
        assert_eq!(validate_record(&v).unwrap_err(), vec!["missing field: category".to_string()]);

        let mut v = base();
        v["category"] = "Beverage".into();
        let e = validate_record(&v).unwrap_err();
        assert_eq!(e.len(), 1);
        assert!(e[0].contains("Beverage") && e[0].contains("Combustible, Non-Combustible, Nicotine Replacement"));

        let mut v = base();
        v["usage_context"]["settings"] = "indoors".into();
        v.as_object_mut().unwrap().remove("query");
        v["sub-category"] = "Gums".into();
        let e = validate_record(&v).unwrap_err();
        assert_eq!(e.len(), 3, "{e:?}");
        assert!(e.contains(&"missing field: query".to_string()));
        assert!(e.contains(&"wrong type: usage_context.settings (expected list)".to_string()));
        assert!(e.iter().any(|m| m.starts_with("invalid sub-category")));
    }

    #[test]
    fn vocab_examples() {
        let v = build_vocab(&["a a b"], 1).unwrap();
        assert_eq!(v.tokens, vec!["<pad>", "<unk>", "<bos>", "<eos>", "a", "b"]);
        let v2 = build_vocab(&["a a b"], 2).unwrap();
        assert!(!v2.contains("b"));
        let empty: [&str; 0] = [];
        assert!(build_vocab(&empty, 1).is_err());
    }

    #[test]
    fn tokenize_examples() {
        let v = build_vocab(&["red box", "blue box"], 1).unwrap();
        assert_eq!(tokenize("", &v, 5), vec![BOS, EOS, PAD, PAD, PAD]);
        let ids = tokenize("Red hat", &v, 6);
        assert_eq!(ids, vec![BOS, v.id("red"), UNK, EOS, PAD, PAD]);
        let ids = tokenize("red box blue box red", &v, 4);
        assert_eq!(ids, vec![BOS, v.id("red"), v.id("box"), EOS]);
        assert_eq!(strip_padding(&tokenize("red", &v, 6)), &[BOS, v.id("red"), EOS]);
    }

    #[test]
    fn encode_decode_round_trip() {
        let (s, _) = small();
        let corpus: Vec<&str> = s.iter().map(|x| x.description_text.as_str()).collect();
        let v = build_vocab(&corpus, 1).unwrap();
        for text in corpus.iter().step_by(7) {
            let ids = tokenize(text, &v, 40);
            assert_eq!(v.decode(&ids[1..]), *text);
        }
    }

    #[test]
    fn description_fits_decoder_length() {
        for c in 0..TAXONOMY.len() {
            let r = record_for(c, "x");
            assert!(words(&description_text(&r)).count() <= 28, "{}", description_text(&r));
            assert!(words(&prompt_text(&r.sub_category, &r.category)).count() <= 14);
            assert!(description_text(&r).starts_with(&phrase(&r.sub_category)));
        }
    }

    #[test]
    fn write_and_load_round_trip() {
        let (s, m) = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &s, &m).unwrap();
        let d = load_dataset(dir.path()).unwrap();
        assert_eq!(d.manifest, m);
        for (a, b) in s.iter().zip(&d.samples) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.record, b.record);
            assert_eq!(a.description_text, b.description_text);
            assert_eq!(a.band, b.band);
            assert!(a.band.is_some());
        }
        assert_eq!(validate_file(&dir.path().join("dataset.jsonl")).unwrap(), vec![]);
    }

    #[test]
    fn pixel_mean_centroid_beats_chance() {
        let (s, m) = generate_synthetic_dataset(&DataConfig { n_classes: 8, n_per_class: 20, image_size: 64, seed: 5 }, 8).unwrap();
        let d = Dataset::new(s, m).unwrap();
        let feats = |ids: &[String]| -> Vec<(Vec<f64>, usize)> {
            d.split(ids).unwrap().iter().map(|s| (pixel_mean_features(&s.image, 8), s.class_id)).collect()
        };
        let acc = nearest_centroid_accuracy(&feats(&d.manifest.train), &feats(&d.manifest.test));
        assert!(acc > 2.0 / 6.0, "{acc}");
    }

    #[test]
    fn retention_envelope_on_default_corpus() {
        let (s, _) = generate_synthetic_dataset(&DataConfig { n_per_class: 10, ..Default::default() }, 8).unwrap();
        let cfg = SamplerConfig::default();
        let mean = s.iter().map(|x| PatchSet::from_image(&x.image, 8, &cfg).unwrap().retention()).sum::<f64>() / s.len() as f64;
        assert!((0.6..=0.9).contains(&mean), "mean retention {mean}");
    }
}
