//! Deterministic stand-ins for the external model servers.
//!
//! Generated images are real PNGs carrying their class label and prompt in
//! text chunks, which the mock embedder and captioner read back. That lets
//! embeddings cluster per class without any learned model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::pngio::{self, RgbImage};
use super::{Captioner, Embedder, Rewriter, StyleTransfer, TextToImage};
use crate::error::{Error, Result};
use crate::model::{hash_parts, sha256_hex, Embedding, PromptRecord, EMBEDDING_DIM};
use crate::prompt::RewriteRequest;

pub const CLASS_LABEL_KEY: &str = "air:class_label";
pub const PROMPT_KEY: &str = "air:prompt";
pub const STYLE_KEY: &str = "air:style";

/// Expected norm of the per-image noise added to a class anchor.
pub const DEFAULT_EMBED_SIGMA: f64 = 0.05;

const LATTICE: usize = 9;

fn rng_from(parts: &[&[u8]]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(hash_parts(parts))
}

/// Smooth pseudorandom texture: bilinear interpolation over a random colour lattice.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockTextToImage;

impl TextToImage for MockTextToImage {
    fn generate(&self, prompt: &PromptRecord, seed: u64, size: u32) -> Result<Vec<u8>> {
        let text = prompt.text();
        let mut rng = rng_from(&[b"mock-t2i", text.as_bytes(), &seed.to_le_bytes(), &size.to_le_bytes()]);
        let lattice: Vec<[f32; 3]> = (0..LATTICE * LATTICE)
            .map(|_| [rng.random_range(0.0..255.0), rng.random_range(0.0..255.0), rng.random_range(0.0..255.0)])
            .collect();
        let n = size as usize;
        let cell = (n - 1) as f32 / (LATTICE - 1) as f32;
        let mut pixels = Vec::with_capacity(n * n * 3);
        for y in 0..n {
            let fy = y as f32 / cell;
            let y0 = (fy.floor() as usize).min(LATTICE - 2);
            let ty = fy - y0 as f32;
            for x in 0..n {
                let fx = x as f32 / cell;
                let x0 = (fx.floor() as usize).min(LATTICE - 2);
                let tx = fx - x0 as f32;
                let c00 = lattice[y0 * LATTICE + x0];
                let c01 = lattice[y0 * LATTICE + x0 + 1];
                let c10 = lattice[(y0 + 1) * LATTICE + x0];
                let c11 = lattice[(y0 + 1) * LATTICE + x0 + 1];
                for ch in 0..3 {
                    let top = c00[ch] + (c01[ch] - c00[ch]) * tx;
                    let bottom = c10[ch] + (c11[ch] - c10[ch]) * tx;
                    pixels.push((top + (bottom - top) * ty).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        pngio::encode(&RgbImage {
            width: size,
            height: size,
            pixels,
            text: vec![
                (CLASS_LABEL_KEY.to_string(), prompt.class_label.clone()),
                (PROMPT_KEY.to_string(), text),
            ],
        })
    }

    fn identifier(&self) -> String {
        "mock-t2i-v1".into()
    }
}

/// Unit anchor vector for a class label.
pub fn class_anchor(label: &str) -> Vec<f64> {
    let mut rng = rng_from(&[b"mock-anchor", label.as_bytes()]);
    let v: Vec<f64> = (0..EMBEDDING_DIM).map(|_| rng.sample(StandardNormal)).collect();
    normalize(v)
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Class anchor plus content-hash-seeded Gaussian noise, renormalised.
///
/// Noise components have standard deviation `sigma / sqrt(512)`, so the noise
/// vector's expected norm is about `sigma` and two same-class images have
/// cosine similarity near `1 - sigma²`.
#[derive(Debug, Clone, Copy)]
pub struct MockEmbedder {
    pub sigma: f64,
}

impl MockEmbedder {
    pub fn new(sigma: f64) -> Self {
        MockEmbedder { sigma }
    }

    /// Embedding for a (label, content hash) pair; exposed for building fixtures.
    pub fn embed_label(&self, label: &str, content: &[u8]) -> Embedding {
        let anchor = class_anchor(label);
        let mut rng = rng_from(&[b"mock-embed-noise", content]);
        let scale = self.sigma / (EMBEDDING_DIM as f64).sqrt();
        let v: Vec<f64> = anchor
            .iter()
            .map(|a| a + scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let v = normalize(v);
        Embedding::new(v.into_iter().map(|x| x as f32).collect()).expect("finite 512-d vector")
    }
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_EMBED_SIGMA)
    }
}

impl Embedder for MockEmbedder {
    fn embed(&self, image: &[u8]) -> Result<Embedding> {
        let decoded = pngio::decode(image)?;
        let label = decoded.text_value(CLASS_LABEL_KEY).unwrap_or("");
        Ok(self.embed_label(label, image))
    }

    fn identifier(&self) -> String {
        format!("mock-embedder-v1(sigma={})", self.sigma)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MockCaptioner;

impl Captioner for MockCaptioner {
    fn caption(&self, image: &[u8]) -> Result<String> {
        let decoded = pngio::decode(image)?;
        let label: String = decoded
            .text_value(CLASS_LABEL_KEY)
            .unwrap_or("image")
            .chars()
            .map(|c| if matches!(c, ',' | '(' | ')') { ' ' } else { c })
            .collect();
        Ok(format!("photo of {}, detail {}", label.trim(), &sha256_hex(image)[..8]))
    }

    fn identifier(&self) -> String {
        "mock-captioner-v1".into()
    }
}

/// Fixed template expansion over the `view`, `location`, and `time` contexts.
/// Other non-category contexts are appended as plain terms.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockRewriter;

impl Rewriter for MockRewriter {
    fn rewrite(&self, request: &RewriteRequest) -> Result<String> {
        let combo = &request.combination;
        let mut sentence = format!("A captivating {}", combo.option_for("view").unwrap_or("photo"));
        if let Some(location) = combo.option_for("location") {
            sentence.push_str(&format!(" of a {location}"));
        }
        if let Some(time) = combo.option_for("time") {
            sentence.push_str(&format!(" in the {time}"));
        }
        let mut parts = vec![sentence];
        for a in &combo.assignments {
            if !matches!(a.context.as_str(), "category" | "view" | "location" | "time") {
                parts.push(a.option.clone());
            }
        }
        parts.push(format!("({}:1.4)", combo.class_label));
        parts.push("4K UHD image".into());
        parts.push("Photorealistic".into());
        Ok(parts.join(", "))
    }

    fn identifier(&self) -> String {
        "mock-rewriter-v1".into()
    }
}

/// Per-channel offset applied to RGB values, saturating at 0 and 255.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelShift(pub [i16; 3]);

impl ChannelShift {
    pub fn compose(self, then: ChannelShift) -> ChannelShift {
        ChannelShift([self.0[0] + then.0[0], self.0[1] + then.0[1], self.0[2] + then.0[2]])
    }

    pub fn apply(self, pixels: &mut [u8]) {
        for px in pixels.chunks_exact_mut(3) {
            for (c, shift) in px.iter_mut().zip(self.0) {
                *c = (*c as i16 + shift).clamp(0, 255) as u8;
            }
        }
    }
}

pub fn domain_shift(domain: &str) -> Option<ChannelShift> {
    match domain {
        "none" => Some(ChannelShift([0, 0, 0])),
        "warm" => Some(ChannelShift([12, 4, -10])),
        "cool" => Some(ChannelShift([-10, 0, 12])),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MockStyleTransfer;

impl StyleTransfer for MockStyleTransfer {
    fn transfer(&self, image: &[u8], target_domain: &str) -> Result<Vec<u8>> {
        let shift = domain_shift(target_domain)
            .ok_or_else(|| Error::validation("target_domain", format!("unknown style domain `{target_domain}`")))?;
        let mut decoded = pngio::decode(image)?;
        shift.apply(&mut decoded.pixels);
        if target_domain != "none" {
            let history = match decoded.text_value(STYLE_KEY) {
                Some(prev) => format!("{prev}+{target_domain}"),
                None => target_domain.to_string(),
            };
            decoded.set_text(STYLE_KEY, &history);
        }
        pngio::encode(&decoded)
    }

    fn identifier(&self) -> String {
        "mock-style-v1".into()
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::backend::{caption_image, generate_image};
    use crate::filter::cosine_similarity;
    use crate::model::{FilterVerdict, ImageRecord, PromptSource, Stage};
    use crate::prompt::{parse_prompt, RewriteRequest};

    fn prompt(label: &str, text: &str) -> PromptRecord {
        PromptRecord {
            id: "p-1".into(),
            terms: parse_prompt(text).unwrap(),
            source: PromptSource::Simplistic,
            combination: None,
            class_label: label.into(),
        }
    }

    fn cos(a: &Embedding, b: &Embedding) -> f64 {
        cosine_similarity(&a.to_f64(), &b.to_f64()).unwrap()
    }

    #[test]
    fn t2i_is_deterministic_and_seed_sensitive() {
        let p = prompt("fire", "fire, forest");
        let a = generate_image(&MockTextToImage, &p, 1, 256).unwrap();
        let b = generate_image(&MockTextToImage, &p, 1, 256).unwrap();
        let c = generate_image(&MockTextToImage, &p, 2, 256).unwrap();
        assert_eq!(sha256_hex(&a), sha256_hex(&b));
        assert_ne!(sha256_hex(&a), sha256_hex(&c));
    }

    #[test]
    fn t2i_honours_size() {
        let p = prompt("fire", "fire");
        let bytes = generate_image(&MockTextToImage, &p, 9, 512).unwrap();
        let img = pngio::decode(&bytes).unwrap();
        assert_eq!((img.width, img.height), (512, 512));
        assert!(generate_image(&MockTextToImage, &p, 9, 300).is_err());
    }

    #[test]
    fn identical_bytes_embed_identically() {
        let p = prompt("fire", "fire");
        let bytes = generate_image(&MockTextToImage, &p, 3, 256).unwrap();
        let e = MockEmbedder::default();
        let a = e.embed(&bytes).unwrap();
        let b = e.embed(&bytes).unwrap();
        assert_eq!(a, b);
        assert!((cos(&a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let e = MockEmbedder::default();
        for i in 0u32..100 {
            let v = e.embed_label(&format!("class{}", i % 3), &i.to_le_bytes());
            let norm = v.values().iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
        }
    }

    #[test]
    fn same_class_cosine_matches_simulation() {
        // Independent estimate: anchor a plus two noise draws of norm ~sigma gives
        // cos ≈ 1 / (1 + sigma²) ≈ 0.9975 for sigma = 0.05.
        let e = MockEmbedder::default();
        let a = e.embed_label("fire", b"one");
        let b = e.embed_label("fire", b"two");
        let c = cos(&a, &b);
        assert!(c > 0.99, "cos {c}");
        assert!((c - 1.0 / (1.0 + 0.05f64.powi(2))).abs() < 2e-3);
    }

    #[test]
    fn same_class_pairs_beat_cross_class_pairs() {
        let e = MockEmbedder::new(0.3);
        let (mut same, mut cross) = (0.0, 0.0);
        for i in 0u32..1000 {
            let x = e.embed_label("a", &(2 * i).to_le_bytes());
            let y = e.embed_label("a", &(2 * i + 1).to_le_bytes());
            let z = e.embed_label("b", &(2 * i + 1).to_le_bytes());
            same += cos(&x, &y);
            cross += cos(&x, &z);
        }
        assert!(same / 1000.0 > cross / 1000.0 + 0.5);
    }

    fn source_record(id: &str, label: &str) -> ImageRecord {
        ImageRecord {
            id: id.into(),
            class_label: label.into(),
            image_ref: "0".repeat(64),
            embedding: MockEmbedder::default().embed_label(label, id.as_bytes()),
            prompt_id: "p".into(),
            seed: 0,
            stage_history: vec![Stage::Generated],
            filter_verdict: FilterVerdict::Kept,
        }
    }

    #[test]
    fn captions_are_deterministic_and_distinct() {
        let mut seen = HashSet::new();
        for seed in 0..50 {
            let bytes = MockTextToImage.generate(&prompt("fire", "fire"), seed, 256).unwrap();
            let rec = source_record(&format!("img-{seed}"), "fire");
            let p1 = caption_image(&MockCaptioner, &bytes, &rec).unwrap();
            let p2 = caption_image(&MockCaptioner, &bytes, &rec).unwrap();
            assert_eq!(p1, p2);
            assert_eq!(p1.source, PromptSource::Extracted);
            assert!(p1.text().starts_with("photo of fire, detail "));
            assert!(seen.insert(p1.text()));
        }
    }

    #[test]
    fn mock_rewriter_matches_fixed_template() {
        use crate::model::{Assignment, ContextCombination};
        let combination = ContextCombination {
            assignments: [
                ("category", "small fire and smoke"),
                ("location", "tropical forest"),
                ("view", "drone's view"),
                ("time", "morning"),
            ]
            .iter()
            .map(|(c, o)| Assignment {
                context: c.to_string(),
                option: o.to_string(),
            })
            .collect(),
            class_label: "small fire and smoke".into(),
        };
        let out = MockRewriter.rewrite(&RewriteRequest::new(combination)).unwrap();
        assert_eq!(
            out,
            "A captivating drone's view of a tropical forest in the morning, (small fire and smoke:1.4), 4K UHD \
             image, Photorealistic"
        );
    }

    #[test]
    fn style_none_is_pixel_identity() {
        let bytes = MockTextToImage.generate(&prompt("fire", "fire"), 5, 256).unwrap();
        let out = MockStyleTransfer.transfer(&bytes, "none").unwrap();
        let (a, b) = (pngio::decode(&bytes).unwrap(), pngio::decode(&out).unwrap());
        assert_eq!(a.pixels, b.pixels);
        assert_eq!((a.width, a.height), (b.width, b.height));
    }

    #[test]
    fn style_warm_twice_equals_composed_shift() {
        let bytes = MockTextToImage.generate(&prompt("fire", "fire"), 6, 256).unwrap();
        let twice = MockStyleTransfer
            .transfer(&MockStyleTransfer.transfer(&bytes, "warm").unwrap(), "warm")
            .unwrap();
        let twice = pngio::decode(&twice).unwrap();

        // Oracle: compose the per-channel offsets, apply once in saturating integer arithmetic.
        let warm = [12i32, 4, -10];
        let original = pngio::decode(&bytes).unwrap();
        let expected: Vec<u8> = original
            .pixels
            .iter()
            .enumerate()
            .map(|(i, &v)| (v as i32 + 2 * warm[i % 3]).clamp(0, 255) as u8)
            .collect();
        assert_eq!(twice.pixels, expected);
        assert_eq!((twice.width, twice.height), (original.width, original.height));
        assert_eq!(twice.text_value(STYLE_KEY), Some("warm+warm"));
    }

    #[test]
    fn unknown_style_domain_errors() {
        let bytes = MockTextToImage.generate(&prompt("fire", "fire"), 6, 256).unwrap();
        assert!(MockStyleTransfer.transfer(&bytes, "vaporwave").is_err());
    }
}
