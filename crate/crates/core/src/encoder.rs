//! Stage 1: image → patch tokens → transformer blocks → pooled, projected,
//! unit-norm global embedding.

use rand::Rng;
use rayon::prelude::*;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::layers::{BlockLayout, DenseLayout, MlpLayout};
use crate::ops;
use crate::params::{init_normal, Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Hidden width of the projection head; 0 means a single linear layer.
    pub head_hidden: usize,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// 32×32 input, 8×8 patches, width 64, two blocks of four heads.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            width: 64,
            layers: 2,
            heads: 4,
            mlp_hidden: 128,
            head_hidden: 64,
            embed_dim: 64,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        ops::check_heads(self.width, self.heads)?;
        if self.width == 0 || self.embed_dim == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        Ok(())
    }
}

/// Splits a square image into non-overlapping `p×p` patches, enumerated
/// row-major over the patch grid, each flattened row-major.
pub fn patchify<T: Real>(image: &Image, p: usize) -> Result<Matrix<T>> {
    let (h, w) = (image.height(), image.width());
    if h != w || p == 0 || h % p != 0 {
        return Err(Error::Config(format!(
            "cannot split a {h}x{w} image into {p}x{p} patches"
        )));
    }
    let grid = h / p;
    let mut out = Matrix::zeros(grid * grid, p * p);
    for gy in 0..grid {
        for gx in 0..grid {
            let row = out.row_mut(gy * grid + gx);
            for dy in 0..p {
                for dx in 0..p {
                    row[dy * p + dx] = T::lit(f64::from(image.get(gy * p + dy, gx * p + dx)));
                }
            }
        }
    }
    Ok(out)
}

/// `token[t] = patch[t] · W + b + pos[t]`
pub fn embed_patches<T: Real>(patches: &Matrix<T>, w: &Matrix<T>, b: &[T], pos: &Matrix<T>) -> Result<Matrix<T>> {
    let mut tokens = ops::linear(patches, w, b)?;
    if pos.shape() != tokens.shape() {
        return Err(Error::dim("embed_patches", tokens.shape(), pos.shape()));
    }
    tokens.add_assign(pos);
    Ok(tokens)
}

/// Per-patch token embeddings, `T×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet<T>(pub Matrix<T>);

impl<T: Real> TokenSet<T> {
    pub fn matrix(&self) -> &Matrix<T> {
        &self.0
    }
}

/// Unit-norm global embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalEmbedding<T>(Vec<T>);

impl<T: Real> GlobalEmbedding<T> {
    /// Normalizes `v`; fails on a zero vector.
    pub fn new(v: &[T]) -> Result<Self> {
        ops::l2_normalize(v).map(Self)
    }

    /// Wraps a vector that is already unit-norm (e.g. read back from a file).
    pub fn from_normalized(v: Vec<T>) -> Self {
        Self(v)
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn cosine(&self, other: &Self) -> T {
        crate::tensor::dot(&self.0, &other.0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncodedVars {
    pub tokens: Var,
    pub embedding: Var,
}

/// Parameter layout of the shared encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub patch: DenseLayout,
    pub pos: ParamId,
    pub blocks: Vec<BlockLayout>,
    pub head: MlpLayout,
}

impl Encoder {
    /// Adds freshly initialized encoder parameters (prefix `enc.`) to `store`.
    pub fn init<T: Real, R: Rng>(config: EncoderConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let patch = DenseLayout::add(store, rng, "enc.patch", config.patch_dim(), d)?;
        let pos = store.insert("enc.pos", init_normal(rng, config.tokens(), d, 0.02))?;
        let blocks = (0..config.layers)
            .map(|i| BlockLayout::add(store, rng, &format!("enc.block{i}"), d, config.heads, config.mlp_hidden))
            .collect::<Result<_>>()?;
        let widths = if config.head_hidden == 0 {
            vec![d, config.embed_dim]
        } else {
            vec![d, config.head_hidden, config.embed_dim]
        };
        let head = MlpLayout::add(store, rng, "enc.head", &widths)?;
        Ok(Self {
            config,
            patch,
            pos,
            blocks,
            head,
        })
    }

    /// Ids of every encoder parameter.
    pub fn param_ids<T: Real>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        store.ids().filter(|&id| store.name(id).starts_with("enc.")).collect()
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let s = self.config.image_size;
        if image.height() != s || image.width() != s {
            return Err(Error::Config(format!(
                "image is {}x{}, encoder expects {s}x{s}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    /// Token embeddings before the transformer blocks.
    pub fn embed_on_tape<T: Real>(&self, tape: &mut Tape<'_, T>, p: &Bound, image: &Image) -> Result<Var> {
        self.check_image(image)?;
        let patches = tape.leaf(patchify(image, self.config.patch_size)?);
        let projected = self.patch.apply(tape, p, patches)?;
        tape.add(projected, p[self.pos])
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, p: &Bound, image: &Image) -> Result<EncodedVars> {
        let mut tokens = self.embed_on_tape(tape, p, image)?;
        for block in &self.blocks {
            tokens = block.apply(tape, p, tokens)?;
        }
        let pooled = tape.mean_rows(tokens)?;
        let projected = self.head.apply(tape, p, pooled)?;
        let embedding = tape.l2_normalize_rows(projected)?;
        Ok(EncodedVars { tokens, embedding })
    }

    /// Inference: token set and global embedding of one image.
    pub fn encode<T: Real>(&self, store: &ParamStore<T>, image: &Image) -> Result<(TokenSet<T>, GlobalEmbedding<T>)> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let out = self.forward(&mut tape, &p, image)?;
        Ok((
            TokenSet(tape.value(out.tokens).clone()),
            GlobalEmbedding(tape.value(out.embedding).as_slice().to_vec()),
        ))
    }

    /// Encodes many images in parallel; output order matches input order.
    pub fn encode_all<T: Real>(
        &self,
        store: &ParamStore<T>,
        images: &[&Image],
    ) -> Result<Vec<(TokenSet<T>, GlobalEmbedding<T>)>> {
        images.par_iter().map(|img| self.encode(store, img)).collect()
    }
}
