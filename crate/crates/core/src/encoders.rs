//! Linear two-tower encoders: a trainable student, ridge-fitted frozen
//! teachers, and a toy synthetic captioner built on a teacher backbone.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{dot, norm, LogitScale, Matrix};
use crate::world::{unit, Split, World};

pub const POOL_GRID: usize = 8;
pub const POOLED_DIM: usize = POOL_GRID * POOL_GRID;
pub const MODEL_MAGIC: [u8; 4] = *b"DRMD";

/// Average-pools a square image onto an 8x8 grid. Bin `r` covers rows
/// `[r*S/8, (r+1)*S/8)` (integer division), likewise for columns.
pub fn avgpool(image: &[f32]) -> Result<Vec<f64>> {
    let side = (image.len() as f64).sqrt() as usize;
    if side * side != image.len() || side < POOL_GRID {
        return Err(Error::Precondition(format!(
            "image of {} pixels is not a square of side >= {POOL_GRID}",
            image.len()
        )));
    }
    let mut out = vec![0.0; POOLED_DIM];
    for by in 0..POOL_GRID {
        let (r0, r1) = (by * side / POOL_GRID, (by + 1) * side / POOL_GRID);
        for bx in 0..POOL_GRID {
            let (c0, c1) = (bx * side / POOL_GRID, (bx + 1) * side / POOL_GRID);
            let mut acc = 0.0;
            for r in r0..r1 {
                acc += image[r * side + c0..r * side + c1].iter().map(|&v| v as f64).sum::<f64>();
            }
            out[by * POOL_GRID + bx] = acc / ((r1 - r0) * (c1 - c0)) as f64;
        }
    }
    Ok(out)
}

/// `W · x` without normalization.
pub fn project(w: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != x.len() {
        return Err(Error::shape(format!("{}x{}", w.rows(), w.cols()), format!("vector of {}", x.len())));
    }
    Ok(w.iter_rows().map(|r| dot(r, x)).collect())
}

fn normalized(v: Vec<f64>) -> Result<Vec<f64>> {
    let n = norm(&v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroProjection);
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

fn gauss(rng: &mut impl rand::Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Anything that maps images and captions into a shared unit-norm space.
pub trait Embedder {
    fn embed_image(&self, image: &[f32]) -> Result<Vec<f64>>;
    fn embed_text(&self, caption: &[f64]) -> Result<Vec<f64>>;
}

/// The pair of projection matrices shared by students and teachers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Towers {
    pub w_img: Matrix,
    pub w_txt: Matrix,
}

impl Towers {
    pub fn embed_dim(&self) -> usize {
        self.w_img.rows()
    }

    pub fn caption_dim(&self) -> usize {
        self.w_txt.cols()
    }

    pub fn encode_image(&self, image: &[f32]) -> Result<Vec<f64>> {
        normalized(project(&self.w_img, &avgpool(image)?)?)
    }

    pub fn encode_text(&self, caption: &[f64]) -> Result<Vec<f64>> {
        normalized(project(&self.w_txt, caption)?)
    }
}

impl Embedder for Towers {
    fn embed_image(&self, image: &[f32]) -> Result<Vec<f64>> {
        self.encode_image(image)
    }
    fn embed_text(&self, caption: &[f64]) -> Result<Vec<f64>> {
        self.encode_text(caption)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentModel {
    pub towers: Towers,
    /// Current multiplicative logit scale (trainable, clamped by the trainer).
    pub logit_scale: f64,
}

impl StudentModel {
    /// Gaussian init with std `1/sqrt(fan_in)`.
    pub fn init(embed_dim: usize, caption_dim: usize, logit_scale: f64, seed: u64) -> Result<Self> {
        if embed_dim < 2 {
            return Err(Error::Config("student embed_dim must be >= 2".into()));
        }
        let mut rng = seed::rng_for(&[seed, seed::tag("student-init")]);
        let mut gaussian = |rows: usize, cols: usize| {
            let std = 1.0 / (cols as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| std * gauss(&mut rng))
                .collect();
            Matrix::from_vec(rows, cols, data)
        };
        Ok(Self {
            towers: Towers {
                w_img: gaussian(embed_dim, POOLED_DIM)?,
                w_txt: gaussian(embed_dim, caption_dim)?,
            },
            logit_scale,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.towers.embed_dim()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = ModelMeta {
            kind: "student".into(),
            id: "student".into(),
            embed_dim: self.embed_dim(),
            pooled_dim: POOLED_DIM,
            caption_dim: self.towers.caption_dim(),
            logit_scale: self.logit_scale,
            zero_shot_accuracy: None,
        };
        write_model(path, &meta, &self.towers)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, towers) = read_model(path)?;
        Ok(Self {
            towers,
            logit_scale: meta.logit_scale,
        })
    }
}

impl Embedder for StudentModel {
    fn embed_image(&self, image: &[f32]) -> Result<Vec<f64>> {
        self.towers.encode_image(image)
    }
    fn embed_text(&self, caption: &[f64]) -> Result<Vec<f64>> {
        self.towers.encode_text(caption)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherModel {
    pub teacher_id: String,
    pub towers: Towers,
    pub logit_scale: LogitScale,
    /// Zero-shot accuracy on the eval split measured right after fitting.
    pub zero_shot_accuracy: f64,
}

impl TeacherModel {
    pub fn embed_dim(&self) -> usize {
        self.towers.embed_dim()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = ModelMeta {
            kind: "teacher".into(),
            id: self.teacher_id.clone(),
            embed_dim: self.embed_dim(),
            pooled_dim: POOLED_DIM,
            caption_dim: self.towers.caption_dim(),
            logit_scale: self.logit_scale.get(),
            zero_shot_accuracy: Some(self.zero_shot_accuracy),
        };
        write_model(path, &meta, &self.towers)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, towers) = read_model(path)?;
        if meta.kind != "teacher" {
            return Err(Error::Config(format!("{} holds a {}, not a teacher", path.display(), meta.kind)));
        }
        Ok(Self {
            teacher_id: meta.id,
            towers,
            logit_scale: LogitScale::new(meta.logit_scale)?,
            zero_shot_accuracy: meta.zero_shot_accuracy.unwrap_or(0.0),
        })
    }

    /// Hash of the serialized checkpoint bytes.
    pub fn fingerprint(&self) -> u64 {
        let meta = ModelMeta {
            kind: "teacher".into(),
            id: self.teacher_id.clone(),
            embed_dim: self.embed_dim(),
            pooled_dim: POOLED_DIM,
            caption_dim: self.towers.caption_dim(),
            logit_scale: self.logit_scale.get(),
            zero_shot_accuracy: Some(self.zero_shot_accuracy),
        };
        seed::hash64(&model_bytes(&meta, &self.towers))
    }
}

impl Embedder for TeacherModel {
    fn embed_image(&self, image: &[f32]) -> Result<Vec<f64>> {
        self.towers.encode_image(image)
    }
    fn embed_text(&self, caption: &[f64]) -> Result<Vec<f64>> {
        self.towers.encode_text(caption)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub teacher_id: String,
    pub embed_dim: usize,
    pub ridge_lambda: f64,
    pub logit_scale: LogitScale,
    #[serde(default = "default_fit_samples")]
    pub fit_samples: usize,
}

fn default_fit_samples() -> usize {
    2048
}

/// Per-class unit targets in `R^d`, seeded by the teacher id.
pub fn target_bank(teacher_id: &str, embed_dim: usize, classes: usize) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|c| {
            let mut rng = seed::rng_for(&[seed::tag(teacher_id), seed::tag("targets"), c as u64]);
            unit((0..embed_dim).map(|_| gauss(&mut rng)).collect())
        })
        .collect()
}

/// Ridge regression `P = Yᵀ X (XᵀX + λI)⁻¹`, returned as a `d x features` matrix.
fn ridge(features: &[Vec<f64>], targets: &[&Vec<f64>], lambda: f64) -> Result<Matrix> {
    let n = features.len();
    let p = features[0].len();
    let d = targets[0].len();
    let x = DMatrix::from_fn(n, p, |i, j| features[i][j]);
    let y = DMatrix::from_fn(n, d, |i, j| targets[i][j]);
    let gram = x.transpose() * &x + DMatrix::identity(p, p) * lambda;
    let rhs = x.transpose() * y;
    if lambda == 0.0 {
        // Cholesky can succeed on numerically rank-deficient systems; check the spectrum.
        let diag_max = (0..p).map(|i| gram[(i, i)]).fold(0.0, f64::max);
        let eig_min = gram.clone().symmetric_eigenvalues().min();
        if eig_min <= 1e-10 * diag_max.max(1e-300) {
            return Err(Error::Singular);
        }
    }
    let solution = gram.cholesky().ok_or(Error::Singular)?.solve(&rhs);
    if solution.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular);
    }
    // nalgebra is column-major, so the p x d solution's storage is already the d x p row-major layout.
    Matrix::from_vec(d, p, solution.as_slice().to_vec())
}

pub fn fit_teacher(spec: &TeacherSpec, world: &World) -> Result<TeacherModel> {
    if spec.embed_dim < 2 {
        return Err(Error::Config("teacher embed_dim must be >= 2".into()));
    }
    if spec.ridge_lambda.is_nan() || spec.ridge_lambda < 0.0 {
        return Err(Error::Config("ridge_lambda must be >= 0".into()));
    }
    let samples = world.draw_samples(Split::TeacherFit, spec.fit_samples)?;
    let targets = target_bank(&spec.teacher_id, spec.embed_dim, world.num_classes());
    let pooled = samples
        .iter()
        .map(|s| avgpool(&s.image))
        .collect::<Result<Vec<_>>>()?;
    let captions: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| s.caption.iter().map(|&v| v as f64).collect())
        .collect();
    let ys: Vec<&Vec<f64>> = samples.iter().map(|s| &targets[s.class_id]).collect();
    let towers = Towers {
        w_img: ridge(&pooled, &ys, spec.ridge_lambda)?,
        w_txt: ridge(&captions, &ys, spec.ridge_lambda)?,
    };
    let eval = world.draw_samples(Split::Eval, 1024)?;
    let zero_shot_accuracy = zero_shot_accuracy(&towers, world, &eval)?;
    Ok(TeacherModel {
        teacher_id: spec.teacher_id.clone(),
        towers,
        logit_scale: spec.logit_scale,
        zero_shot_accuracy,
    })
}

/// Nearest-prompt classification accuracy over `samples`.
pub fn zero_shot_accuracy<E: Embedder + ?Sized>(
    model: &E,
    world: &World,
    samples: &[crate::world::Sample],
) -> Result<f64> {
    let prompts = world
        .zero_shot_prompts()
        .iter()
        .map(|p| model.embed_text(p))
        .collect::<Result<Vec<_>>>()?;
    let mut correct = 0usize;
    for s in samples {
        let e = model.embed_image(&s.image)?;
        if argmax_similarity(&e, &prompts) == s.class_id {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len().max(1) as f64)
}

pub(crate) fn argmax_similarity(query: &[f64], keys: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, k) in keys.iter().enumerate() {
        let v = dot(query, k);
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionerSpec {
    pub captioner_id: String,
    /// Teacher whose zero-shot prediction selects the caption class.
    pub backbone: String,
    pub caption_noise_sigma: f64,
    pub seed: u64,
}

/// Toy captioner: classify with a teacher, then emit noisy copies of that class's caption prototype.
#[derive(Clone, Debug)]
pub struct CaptionerModel {
    pub spec: CaptionerSpec,
    backbone: TeacherModel,
    prototypes: Vec<Vec<f64>>,
    prompt_embeddings: Vec<Vec<f64>>,
}

impl CaptionerModel {
    pub fn new(spec: CaptionerSpec, backbone: TeacherModel, world: &World) -> Result<Self> {
        if spec.caption_noise_sigma.is_nan() || spec.caption_noise_sigma < 0.0 {
            return Err(Error::Config("caption_noise_sigma must be >= 0".into()));
        }
        let prototypes = world.zero_shot_prompts();
        let prompt_embeddings = prototypes
            .iter()
            .map(|p| backbone.embed_text(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            backbone,
            prototypes,
            prompt_embeddings,
        })
    }

    pub fn classify(&self, image: &[f32]) -> Result<usize> {
        let e = self.backbone.embed_image(image)?;
        Ok(argmax_similarity(&e, &self.prompt_embeddings))
    }

    /// Caption `j` depends only on the image content and `j`.
    pub fn generate(&self, image: &[f32], n: usize) -> Result<Vec<Vec<f32>>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let class = self.classify(image)?;
        let image_key = image
            .iter()
            .fold(0u64, |acc, v| seed::mix64(acc ^ v.to_bits() as u64));
        let sigma = self.spec.caption_noise_sigma;
        Ok((0..n as u64)
            .map(|j| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(&[self.spec.seed, image_key, j]));
                let v = self.prototypes[class]
                    .iter()
                    .map(|&p| p + sigma * gauss(&mut rng))
                    .collect();
                unit(v).into_iter().map(|x| x as f32).collect()
            })
            .collect())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    id: String,
    embed_dim: usize,
    pooled_dim: usize,
    caption_dim: usize,
    logit_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    zero_shot_accuracy: Option<f64>,
}

fn model_bytes(meta: &ModelMeta, towers: &Towers) -> Vec<u8> {
    let meta_json = serde_json::to_vec(meta).expect("model meta serializes");
    let mut body = Vec::with_capacity((towers.w_img.data().len() + towers.w_txt.data().len()) * 8);
    for v in towers.w_img.data().iter().chain(towers.w_txt.data()) {
        body.extend_from_slice(&v.to_le_bytes());
    }
    container::encode(MODEL_MAGIC, &meta_json, &body)
}

fn write_model(path: &Path, meta: &ModelMeta, towers: &Towers) -> Result<()> {
    container::write_atomic(path, &model_bytes(meta, towers))
}

fn read_model(path: &Path) -> Result<(ModelMeta, Towers)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = container::decode_header(&bytes, MODEL_MAGIC)?;
    let meta: ModelMeta = serde_json::from_slice(header.meta)
        .map_err(|e| Error::Corrupt(format!("model metadata: {e}")))?;
    let n_img = meta.embed_dim * meta.pooled_dim;
    let n_txt = meta.embed_dim * meta.caption_dim;
    let body = container::verify_body(&bytes, &header, (n_img + n_txt) * 8)?;
    let floats: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let towers = Towers {
        w_img: Matrix::from_vec(meta.embed_dim, meta.pooled_dim, floats[..n_img].to_vec())?,
        w_txt: Matrix::from_vec(meta.embed_dim, meta.caption_dim, floats[n_img..].to_vec())?,
    };
    Ok((meta, towers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::WorldConfig;

    fn spec(id: &str, lambda: f64) -> TeacherSpec {
        TeacherSpec {
            teacher_id: id.into(),
            embed_dim: 16,
            ridge_lambda: lambda,
            logit_scale: LogitScale::new(70.0).unwrap(),
            fit_samples: 1024,
        }
    }

    fn noiseless() -> World {
        World::build(WorldConfig {
            pixel_noise_sigma: 0.0,
            caption_noise_sigma: 0.0,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn avgpool_of_constant_image() {
        let pooled = avgpool(&vec![0.25f32; 32 * 32]).unwrap();
        assert!(pooled.iter().all(|&v| v == 0.25));
        assert_eq!(pooled.len(), POOLED_DIM);
        assert!(avgpool(&[0.0; 10]).is_err());
    }

    #[test]
    fn encoders_are_unit_and_deterministic() {
        let world = World::build(WorldConfig::default()).unwrap();
        let student = StudentModel::init(16, 24, 20.0, 1).unwrap();
        let s = world.sample(Split::Train, 3);
        let a = student.embed_image(&s.image).unwrap();
        let b = student.embed_image(&s.image.clone()).unwrap();
        assert_eq!(a, b);
        assert!((norm(&a) - 1.0).abs() < 1e-12);
        let cap: Vec<f64> = s.caption.iter().map(|&v| v as f64).collect();
        let t = student.embed_text(&cap).unwrap();
        assert!((norm(&t) - 1.0).abs() < 1e-12);
        let doubled: Vec<f64> = cap.iter().map(|v| 2.0 * v).collect();
        let t2 = student.embed_text(&doubled).unwrap();
        for (x, y) in t.iter().zip(&t2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn text_encoder_matches_matvec_oracle() {
        let student = StudentModel::init(8, 24, 20.0, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cap: Vec<f64> = (0..24).map(|_| StandardNormal.sample(&mut rng)).collect();
        let w = &student.towers.w_txt;
        let mut raw = [0.0; 8];
        for i in 0..8 {
            for j in 0..24 {
                raw[i] += w[(i, j)] * cap[j];
            }
        }
        let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let got = student.embed_text(&cap).unwrap();
        for i in 0..8 {
            assert!((got[i] - raw[i] / n).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_image_is_a_zero_projection() {
        let student = StudentModel::init(4, 24, 20.0, 1).unwrap();
        assert!(matches!(student.embed_image(&vec![0.0; 64]), Err(Error::ZeroProjection)));
    }

    #[test]
    fn noiseless_teacher_is_perfect() {
        let t = fit_teacher(&spec("teacher-a", 1e-3), &noiseless()).unwrap();
        assert_eq!(t.zero_shot_accuracy, 1.0);
    }

    #[test]
    fn fit_is_deterministic_and_teachers_differ() {
        let world = World::build(WorldConfig::default()).unwrap();
        let a = fit_teacher(&spec("teacher-a", 1.0), &world).unwrap();
        let a2 = fit_teacher(&spec("teacher-a", 1.0), &world).unwrap();
        assert_eq!(a, a2);
        let b = fit_teacher(&spec("teacher-b", 1.0), &world).unwrap();
        for (ra, rb) in a.towers.w_img.iter_rows().zip(b.towers.w_img.iter_rows()) {
            assert!(dot(ra, rb) / (norm(ra) * norm(rb)) < 0.99);
        }
    }

    #[test]
    fn ridge_shrinks_to_zero() {
        let world = World::build(WorldConfig::default()).unwrap();
        let small = fit_teacher(&spec("teacher-a", 1.0), &world).unwrap();
        let huge = fit_teacher(&spec("teacher-a", 1e12), &world).unwrap();
        assert!(huge.towers.w_img.frobenius_norm() < 1e-6 * small.towers.w_img.frobenius_norm());
        assert!(huge.towers.w_txt.frobenius_norm() < 1e-6);
    }

    #[test]
    fn singular_without_ridge() {
        // Noiseless world: only 16 distinct pooled images, so XᵀX (64x64) is rank-deficient.
        let err = fit_teacher(&spec("teacher-a", 0.0), &noiseless()).unwrap_err();
        assert!(matches!(err, Error::Singular));
        assert!(err.to_string().contains("ridge_lambda > 0"));
    }

    #[test]
    fn fitted_teacher_beats_random_projection() {
        let world = World::build(WorldConfig::default()).unwrap();
        let teacher = fit_teacher(&spec("teacher-a", 1.0), &world).unwrap();
        let random = StudentModel::init(16, 24, 20.0, 99).unwrap();
        let eval = world.draw_samples(Split::Eval, 1024).unwrap();
        let rand_acc = zero_shot_accuracy(&random, &world, &eval).unwrap();
        assert!(teacher.zero_shot_accuracy > rand_acc + 0.3, "{} vs {rand_acc}", teacher.zero_shot_accuracy);
    }

    #[test]
    fn captioner_examples() {
        let world = noiseless();
        let teacher = fit_teacher(&spec("teacher-a", 1e-3), &world).unwrap();
        let capper = CaptionerModel::new(
            CaptionerSpec {
                captioner_id: "cap".into(),
                backbone: "teacher-a".into(),
                caption_noise_sigma: 0.2,
                seed: 3,
            },
            teacher,
            &world,
        )
        .unwrap();
        let s = world.sample(Split::Train, 0);
        assert!(capper.generate(&s.image, 0).unwrap().is_empty());
        let a = capper.generate(&s.image, 3).unwrap();
        assert_eq!(a, capper.generate(&s.image, 3).unwrap());
        assert_ne!(a[0], a[1]);
        // Caption j does not depend on how many were requested.
        assert_eq!(a[1], capper.generate(&s.image, 2).unwrap()[1]);
        for s in world.draw_samples(Split::Eval, 200).unwrap() {
            assert_eq!(capper.classify(&s.image).unwrap(), s.class_id);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let world = World::build(WorldConfig::default()).unwrap();
        let t = fit_teacher(&spec("teacher-a", 1.0), &world).unwrap();
        let p = dir.path().join("t.model");
        t.save(&p).unwrap();
        assert_eq!(TeacherModel::load(&p).unwrap(), t);
        let s = StudentModel::init(16, 24, 20.0, 1).unwrap();
        let sp = dir.path().join("s.model");
        s.save(&sp).unwrap();
        assert_eq!(StudentModel::load(&sp).unwrap(), s);
        assert!(TeacherModel::load(&sp).is_err());
    }

    /// Fraction of augmented views whose default-teacher embedding keeps a
    /// positive cosine with the unaugmented one, measured once on the default
    /// world (10⁴ draws). Small crops often land in another class's region.
    const PINNED_POSITIVE_FRACTION: f64 = 0.8082;

    #[test]
    fn teacher_cosine_survives_most_augmentations() {
        let world = World::build(WorldConfig::default()).unwrap();
        let mut sp = spec("teacher-a", 1.0);
        sp.embed_dim = 32;
        sp.fit_samples = 2048;
        let teacher = fit_teacher(&sp, &world).unwrap();
        let side = world.config().image_side;
        let n = 10_000;
        let mut positive = 0;
        for s in world.draw_samples(Split::Train, n).unwrap() {
            let params = crate::augment::draw_params(crate::seed::derive(&[s.sample_id, 99]), side).unwrap();
            let view = crate::augment::apply(&s.image, &params).unwrap();
            let a = teacher.embed_image(&s.image).unwrap();
            let b = teacher.embed_image(&view.pixels).unwrap();
            if dot(&a, &b) > 0.0 {
                positive += 1;
            }
        }
        let frac = positive as f64 / n as f64;
        assert!(frac >= PINNED_POSITIVE_FRACTION - 0.01, "{frac}");
        assert!(frac > 0.5, "{frac}");
    }
}
