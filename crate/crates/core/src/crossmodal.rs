//! Text classifier logits and bidirectional cross-attention fusion.
//!
//! Both attention maps use raw features as queries, keys and values (no
//! learned projections) and normalize over the key axis.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurepack::{read_pack, write_pack, FeatureMatrix};
use crate::linalg::{softmax_rows, Mat};

#[derive(Debug, Clone, PartialEq)]
pub struct CrossModalHead {
    /// `N x C`, trainable.
    pub text_weights: Mat,
    pub gamma: f64,
    pub eta: f64,
    /// Temperature on the plain text-classifier term.
    pub clip_scale: f64,
    /// Temperature inside both attention softmaxes.
    pub attn_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub gamma: f64,
    pub eta: f64,
    pub clip_scale: f64,
    pub attn_scale: f64,
}

impl Default for HeadParams {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            eta: 0.5,
            clip_scale: 1.0,
            attn_scale: 1.0,
        }
    }
}

impl CrossModalHead {
    pub fn new(text_weights: Mat, params: HeadParams) -> Result<Self> {
        let head = Self {
            text_weights,
            gamma: params.gamma,
            eta: params.eta,
            clip_scale: params.clip_scale,
            attn_scale: params.attn_scale,
        };
        head.validate()?;
        Ok(head)
    }

    pub fn params(&self) -> HeadParams {
        HeadParams {
            gamma: self.gamma,
            eta: self.eta,
            clip_scale: self.clip_scale,
            attn_scale: self.attn_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.eta >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma and eta must be non-negative, got {} and {}",
                self.gamma, self.eta
            )));
        }
        if !self.clip_scale.is_finite() || !self.attn_scale.is_finite() {
            return Err(Error::InvalidConfig("scales must be finite".into()));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.text_weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.text_weights.ncols()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_pack(
            &FeatureMatrix::from_mat(&self.text_weights)?,
            dir.join("text_weights.ccaf"),
        )?;
        let path = dir.join("head.json");
        let text =
            serde_json::to_string_pretty(&self.params()).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("head.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let params: HeadParams = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        Self::new(read_pack(dir.join("text_weights.ccaf"))?.to_mat(), params)
    }
}

/// Key/value source of the text-side attention.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionContext {
    pub kv_features: Mat,
}

impl FusionContext {
    pub fn new(kv_features: Mat) -> Result<Self> {
        if kv_features.nrows() == 0 {
            return Err(Error::EmptySplit("fusion context has no rows".into()));
        }
        Ok(Self { kv_features })
    }
}

fn check_dim(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::DimensionMismatch(format!(
            "{what} has {got} columns, text weights have {want}"
        )));
    }
    Ok(())
}

/// `clip_scale * query * W_t^T`.
pub fn clip_logits(query: &Mat, head: &CrossModalHead) -> Result<Mat> {
    check_dim("query", query.ncols(), head.dim())?;
    Ok(query * head.text_weights.transpose() * head.clip_scale)
}

/// `N x |X|` attention of class rows over context rows.
pub fn text_attention(head: &CrossModalHead, ctx: &FusionContext) -> Result<Mat> {
    check_dim("context", ctx.kv_features.ncols(), head.dim())?;
    Ok(softmax_rows(
        &(&head.text_weights * ctx.kv_features.transpose()),
        head.attn_scale,
    ))
}

/// Text classifier enriched with image features, `C x N`.
pub fn fuse_text(head: &CrossModalHead, ctx: &FusionContext) -> Result<Mat> {
    Ok((text_attention(head, ctx)? * &ctx.kv_features).transpose())
}

/// `B x N` attention of query rows over class rows.
pub fn image_attention(query: &Mat, head: &CrossModalHead) -> Result<Mat> {
    check_dim("query", query.ncols(), head.dim())?;
    Ok(softmax_rows(
        &(query * head.text_weights.transpose()),
        head.attn_scale,
    ))
}

/// Image features augmented by text features, `B x C`.
pub fn fuse_image(query: &Mat, head: &CrossModalHead) -> Result<Mat> {
    Ok(image_attention(query, head)? * &head.text_weights)
}

/// The three unweighted summands of the cross-modal logits.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossModalTerms {
    pub clip: Mat,
    pub text_fused: Mat,
    pub image_fused: Mat,
}

impl CrossModalTerms {
    pub fn combine(&self, gamma: f64, eta: f64) -> Mat {
        &self.clip + &self.text_fused * gamma + &self.image_fused * eta
    }
}

pub fn crossmodal_terms(
    query: &Mat,
    head: &CrossModalHead,
    ctx: &FusionContext,
) -> Result<CrossModalTerms> {
    Ok(CrossModalTerms {
        clip: clip_logits(query, head)?,
        text_fused: query * fuse_text(head, ctx)?,
        image_fused: fuse_image(query, head)? * head.text_weights.transpose(),
    })
}

/// `clip + gamma * q W_t* + eta * F_q* W_t^T`.
pub fn crossmodal_logits(query: &Mat, head: &CrossModalHead, ctx: &FusionContext) -> Result<Mat> {
    Ok(crossmodal_terms(query, head, ctx)?.combine(head.gamma, head.eta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{argmax_row, max_abs_diff, normalize_rows_mut};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Mat::from_fn(rows, cols, |_, _| rng.random::<f64>() - 0.5);
        normalize_rows_mut(&mut m).unwrap();
        m
    }

    fn head(w: Mat, gamma: f64, eta: f64, clip_scale: f64, attn_scale: f64) -> CrossModalHead {
        CrossModalHead::new(
            w,
            HeadParams {
                gamma,
                eta,
                clip_scale,
                attn_scale,
            },
        )
        .unwrap()
    }

    #[test]
    fn clip_logits_cosines() {
        let w = random_unit(3, 5, 1);
        let h = head(w.clone(), 0.0, 0.0, 1.0, 1.0);
        let q = w.rows(1, 1).into_owned();
        let l = clip_logits(&q, &h).unwrap();
        assert!((l[(0, 1)] - 1.0).abs() < 1e-12);
        for n in [0, 2] {
            assert!((l[(0, n)] - w.row(n).dot(&w.row(1))).abs() < 1e-12);
        }
        let hot = head(w, 0.0, 0.0, 100.0, 1.0);
        let l100 = clip_logits(&q, &hot).unwrap();
        assert!(max_abs_diff(&l100, &(&l * 100.0)) < 1e-10);
        assert_eq!(argmax_row(&l100, 0), argmax_row(&l, 0));
    }

    #[test]
    fn single_class_clip_logit() {
        let w = random_unit(1, 4, 2);
        let q = random_unit(1, 4, 3);
        let l = clip_logits(&q, &head(w.clone(), 0.0, 0.0, 2.5, 1.0)).unwrap();
        assert_eq!(l.shape(), (1, 1));
        assert!((l[(0, 0)] - 2.5 * q.row(0).dot(&w.row(0))).abs() < 1e-12);
    }

    #[test]
    fn single_context_row_degenerates() {
        let h = head(random_unit(3, 4, 4), 1.0, 1.0, 1.0, 3.0);
        let x = random_unit(1, 4, 5);
        let ctx = FusionContext::new(x.clone()).unwrap();
        let fused = fuse_text(&h, &ctx).unwrap();
        assert_eq!(fused.shape(), (4, 3));
        for n in 0..3 {
            assert!(max_abs_diff(&fused.columns(n, 1).transpose(), &x) < 1e-12);
        }
    }

    #[test]
    fn attention_rows_stochastic() {
        let h = head(random_unit(4, 6, 6), 1.0, 1.0, 1.0, 7.0);
        let ctx = FusionContext::new(random_unit(9, 6, 7)).unwrap();
        let q = random_unit(5, 6, 8);
        for a in [
            text_attention(&h, &ctx).unwrap(),
            image_attention(&q, &h).unwrap(),
        ] {
            for row in a.row_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn saturated_text_attention_selects_aligned_rows() {
        let x = Mat::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let h = head(x.clone(), 1.0, 1.0, 1.0, 200.0);
        let fused = fuse_text(&h, &FusionContext::new(x.clone()).unwrap()).unwrap();
        // Oracle: off-aligned weight is 1/(1+e^{200}).
        assert!(max_abs_diff(&fused.transpose(), &x) < 1e-12);
    }

    #[test]
    fn image_fusion_cases() {
        let t = random_unit(1, 4, 9);
        let h = head(t.clone(), 0.0, 1.0, 1.0, 1.0);
        let out = fuse_image(&random_unit(3, 4, 10), &h).unwrap();
        for i in 0..3 {
            assert!(max_abs_diff(&out.rows(i, 1).into_owned(), &t) < 1e-12);
        }

        let w = Mat::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let sharp = head(w.clone(), 0.0, 1.0, 1.0, 100.0);
        let q = w.rows(2, 1).into_owned();
        let out = fuse_image(&q, &sharp).unwrap();
        assert!(max_abs_diff(&out, &q) < 1e-12);
    }

    #[test]
    fn fused_image_rows_in_convex_hull() {
        let w = random_unit(4, 5, 11);
        let h = head(w.clone(), 0.0, 1.0, 1.0, 2.0);
        let out = fuse_image(&random_unit(6, 5, 12), &h).unwrap();
        for j in 0..5 {
            let col = w.column(j);
            let (lo, hi) = (col.min(), col.max());
            for i in 0..6 {
                assert!(out[(i, j)] >= lo - 1e-12 && out[(i, j)] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn zero_balance_is_clip_only() {
        let h = head(random_unit(3, 4, 13), 0.0, 0.0, 1.7, 1.0);
        let q = random_unit(2, 4, 14);
        let ctx = FusionContext::new(random_unit(5, 4, 15)).unwrap();
        assert_eq!(
            crossmodal_logits(&q, &h, &ctx).unwrap(),
            clip_logits(&q, &h).unwrap()
        );
    }

    #[test]
    fn scalar_hand_expansion() {
        let t = random_unit(1, 3, 16);
        let q = random_unit(1, 3, 17);
        let x = random_unit(1, 3, 18);
        let (tau, gamma, eta) = (1.3, 0.4, 0.7);
        let h = head(t.clone(), gamma, eta, tau, 2.0);
        let l2 = crossmodal_logits(&q, &h, &FusionContext::new(x.clone()).unwrap()).unwrap();
        let cos = q.row(0).dot(&t.row(0));
        let expected = tau * cos + gamma * q.row(0).dot(&x.row(0)) + eta * t.row(0).dot(&t.row(0));
        assert!((l2[(0, 0)] - expected).abs() < 1e-12);
    }

    #[test]
    fn rows_independent_with_fixed_context() {
        let h = head(random_unit(3, 6, 19), 0.8, 0.6, 1.0, 4.0);
        let ctx = FusionContext::new(random_unit(7, 6, 20)).unwrap();
        let q = random_unit(5, 6, 21);
        let full = crossmodal_logits(&q, &h, &ctx).unwrap();
        for i in 0..5 {
            let one = crossmodal_logits(&q.rows(i, 1).into_owned(), &h, &ctx).unwrap();
            assert!(max_abs_diff(&one, &full.rows(i, 1).into_owned()) < 1e-12);
        }
    }

    #[test]
    fn negative_balance_rejected() {
        let r = CrossModalHead::new(
            Mat::identity(2, 2),
            HeadParams {
                gamma: -1.0,
                ..HeadParams::default()
            },
        );
        assert!(matches!(r, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let h = head(random_unit(3, 4, 22), 0.25, 0.75, 1.0, 2.0);
        let dir = tempfile::tempdir().unwrap();
        h.save(dir.path()).unwrap();
        let back = CrossModalHead::load(dir.path()).unwrap();
        assert_eq!(back.params(), h.params());
        assert!(max_abs_diff(&back.text_weights, &h.text_weights) < 1e-7);
    }
}
