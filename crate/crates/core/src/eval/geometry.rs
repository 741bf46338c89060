use std::collections::BTreeSet;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::eval::svg::{scatter_svg, ScatterPoint};
use crate::model::{decode, DecodeOptions, Model};
use crate::scalar::Scalar;
use crate::taskgen::TrajectorySample;
use crate::train::{helper_embedding, prompt_layout};

pub const MIN_LATENTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum PointKind {
    Text,
    Visual,
    Latent,
}

impl PointKind {
    pub fn name(self) -> &'static str {
        match self {
            PointKind::Text => "text",
            PointKind::Visual => "visual",
            PointKind::Latent => "latent",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometryPoint {
    pub kind: PointKind,
    /// Task name, or `vocab` for text embeddings.
    pub task: String,
    pub vector: Vec<f64>,
}

/// Top two principal axes of a point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    /// Share of total variance carried by each axis.
    pub explained: [f64; 2],
}

impl Pca {
    pub fn project(&self, v: &[f64]) -> [f64; 2] {
        let c: Vec<f64> = v.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        let dot = |a: &[f64]| a.iter().zip(&c).map(|(x, y)| x * y).sum();
        [dot(&self.components[0]), dot(&self.components[1])]
    }
}

/// PCA from the eigen-decomposition of the population covariance. Each
/// axis is signed so its first nonzero entry is positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Pca> {
    let n = points.len();
    let d = points.first().map_or(0, Vec::len);
    if n < 2 || d < 2 {
        return Err(Error::Invalid(format!("PCA needs at least 2 points of dimension 2, got {n} of {d}")));
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let axis = |k: usize| {
        let mut v: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
        if v.iter().find(|x| x.abs() > 1e-12).is_some_and(|&x| x < 0.0) {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    let share = |k: usize| if total > 0.0 { eig.eigenvalues[order[k]].max(0.0) / total } else { 0.0 };
    Ok(Pca { mean, components: [axis(0), axis(1)], explained: [share(0), share(1)] })
}

fn centroid(points: &[&GeometryPoint]) -> Vec<f64> {
    let d = points[0].vector.len();
    let mut c = vec![0.0; d];
    for p in points {
        for (a, x) in c.iter_mut().zip(&p.vector) {
            *a += x;
        }
    }
    c.iter().map(|x| x / points.len() as f64).collect()
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb).max(1e-12)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometryReport {
    pub text_centroid: Vec<f64>,
    pub visual_centroid: Vec<f64>,
    pub latent_centroid: Vec<f64>,
    /// Cosine distances between centroids, in full model width.
    pub dist_latent_visual: f64,
    pub dist_latent_text: f64,
    pub dist_visual_text: f64,
    pub pca: Pca,
    pub points: Vec<GeometryPoint>,
    /// `(pc1, pc2)` of each point, aligned with `points`.
    pub coords: Vec<[f64; 2]>,
    pub counts: [usize; 3],
    /// Latent centroid nearer the visual centroid than the text centroid.
    pub closer_to_visual: bool,
}

impl GeometryReport {
    pub fn from_points(points: Vec<GeometryPoint>) -> Result<Self> {
        let of = |k: PointKind| points.iter().filter(|p| p.kind == k).collect::<Vec<_>>();
        let (text, visual, latent) = (of(PointKind::Text), of(PointKind::Visual), of(PointKind::Latent));
        if latent.len() < MIN_LATENTS {
            return Err(Error::Invalid(format!("only {} latent vectors collected, need {MIN_LATENTS}", latent.len())));
        }
        if text.is_empty() || visual.is_empty() {
            return Err(Error::Invalid("geometry needs text and visual points".into()));
        }
        let (tc, vc, lc) = (centroid(&text), centroid(&visual), centroid(&latent));
        let counts = [text.len(), visual.len(), latent.len()];
        let vectors: Vec<Vec<f64>> = points.iter().map(|p| p.vector.clone()).collect();
        let pca = pca_2d(&vectors)?;
        let coords = vectors.iter().map(|v| pca.project(v)).collect();
        let (dlv, dlt) = (cosine_distance(&lc, &vc), cosine_distance(&lc, &tc));
        Ok(GeometryReport {
            dist_visual_text: cosine_distance(&vc, &tc),
            dist_latent_visual: dlv,
            dist_latent_text: dlt,
            closer_to_visual: dlv < dlt,
            text_centroid: tc,
            visual_centroid: vc,
            latent_centroid: lc,
            pca,
            points,
            coords,
            counts,
        })
    }

    /// Columns `kind,pc1,pc2,task`.
    pub fn points_csv(&self) -> String {
        let mut s = String::from("kind,pc1,pc2,task\n");
        for (p, c) in self.points.iter().zip(&self.coords) {
            s += &format!("{},{},{},{}\n", p.kind.name(), c[0], c[1], p.task);
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        format!(
            "metric,value\nn_text,{}\nn_visual,{}\nn_latent,{}\ndist_latent_visual,{}\ndist_latent_text,{}\ndist_visual_text,{}\nexplained_pc1,{}\nexplained_pc2,{}\ncloser_to_visual,{}\n",
            self.counts[0],
            self.counts[1],
            self.counts[2],
            self.dist_latent_visual,
            self.dist_latent_text,
            self.dist_visual_text,
            self.pca.explained[0],
            self.pca.explained[1],
            self.closer_to_visual
        )
    }

    pub fn scatter_svg(&self) -> String {
        let pts: Vec<ScatterPoint> = self
            .points
            .iter()
            .zip(&self.coords)
            .map(|(p, c)| ScatterPoint { x: c[0], y: c[1], class: p.kind.name().to_string() })
            .collect();
        scatter_svg("Embeddings, first two principal components", &pts)
    }
}

/// Greedy-decodes each sample and gathers: the input-embedding rows of every
/// token id the outputs use, the embedded input patches, and every latent
/// vector the decodes fed back.
pub fn collect_geometry<S: Scalar>(model: &Model<S>, samples: &[&TrajectorySample]) -> Result<Vec<GeometryPoint>> {
    let tape = Tape::new();
    let net = model.bind_frozen(&tape)?;
    let mut points = Vec::new();
    let mut used = BTreeSet::new();
    for s in samples {
        let trace = decode(model, &prompt_layout(s)?, &DecodeOptions::greedy(model.config.max_seq))?;
        used.extend(trace.generated_ids());
        for img in &s.input_images {
            let emb = helper_embedding(&net, img)?.to_vec();
            let d = model.config.d_model;
            for row in emb.chunks(d) {
                points.push(GeometryPoint {
                    kind: PointKind::Visual,
                    task: s.task.name().to_string(),
                    vector: row.iter().map(|&x| x.f64()).collect(),
                });
            }
        }
        for v in trace.latent_inputs {
            points.push(GeometryPoint { kind: PointKind::Latent, task: s.task.name().to_string(), vector: v });
        }
    }
    let table = model.params.at(model.index().tok_emb);
    for id in used {
        points.push(GeometryPoint {
            kind: PointKind::Text,
            task: "vocab".to_string(),
            vector: table.row(id).iter().map(|&x| x.f64()).collect(),
        });
    }
    Ok(points)
}

/// Geometry over the first `n_per_task` samples of each task in `samples`.
pub fn latent_geometry<S: Scalar>(model: &Model<S>, samples: &[TrajectorySample], n_per_task: usize) -> Result<GeometryReport> {
    let mut picked = Vec::new();
    let mut tasks: Vec<_> = samples.iter().map(|s| s.task).collect();
    tasks.sort_by_key(|t| t.name());
    tasks.dedup();
    for t in tasks {
        picked.extend(samples.iter().filter(|s| s.task == t).take(n_per_task));
    }
    GeometryReport::from_points(collect_geometry(model, &picked)?)
}
