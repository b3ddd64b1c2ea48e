//! The full promptable segmentation model: encoder, prompt encoder and mask
//! decoder over one parameter store, with inference helpers.

use crate::backbone::{image_encoder_forward, EncoderParams, ModelConfig};
use crate::eval::{MaskBitmap, Segmenter};
use crate::params::{Ctx, ParamStore};
use crate::rng::Rng;
use crate::samhead::{
    self, select_best_mask, DecodeValues, MaskDecoderParams, MaskPrediction, PromptEncoderParams,
    PromptSet,
};
use crate::tensor::{Tape, Tensor, Value};
use crate::{Error, Result};

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub prompt: PromptEncoderParams,
    pub decoder: MaskDecoderParams,
    /// Seed the weights were created from; stored in checkpoints.
    pub seed: u64,
    /// Optimizer step counter; advances during training and persists across
    /// checkpoint save/load so runs can resume.
    pub step: u64,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let rng = Rng::new(seed);
        let encoder = EncoderParams::init(&mut store, &mut rng.fork(1), &config)?;
        let prompt = PromptEncoderParams::init(&mut store, &mut rng.fork(2), config.embed_dim)?;
        let decoder = MaskDecoderParams::init(
            &mut store,
            &mut rng.fork(3),
            config.embed_dim,
            config.head_dim,
        )?;
        Ok(Model {
            config,
            store,
            encoder,
            prompt,
            decoder,
            seed,
            step: 0,
        })
    }

    /// Encoder forward on an existing tape (training path).
    pub fn encode_values<'t>(&self, ctx: &Ctx<'t, '_>, image: Value<'t>) -> Result<Value<'t>> {
        image_encoder_forward(ctx, image, &self.encoder, &self.config)
    }

    /// Prompt encoding plus decoder on an existing tape (training path).
    pub fn decode_values<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        embedding: Value<'t>,
        prompts: &PromptSet,
    ) -> Result<DecodeValues<'t>> {
        let tokens = samhead::encode_prompts(ctx, &self.prompt, prompts, self.config.input_size)?;
        samhead::mask_decode(
            ctx,
            &self.decoder,
            &self.prompt,
            embedding,
            tokens,
            self.config.input_size,
        )
    }

    /// Inference: embed an image on a throwaway tape.
    pub fn embed_image(&self, image: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store);
        let iv = tape.leaf(image)?;
        let emb = self.encode_values(&ctx, iv)?;
        Ok(tape.tensor(emb))
    }

    /// Inference: decode prompts against a cached embedding.
    pub fn decode_prompts(&self, embedding: &Tensor, prompts: &PromptSet) -> Result<MaskPrediction> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store);
        let ev = tape.leaf(embedding)?;
        let out = self.decode_values(&ctx, ev, prompts)?;
        Ok(samhead::read_prediction(&tape, &out))
    }

    /// Best mask in input space: argmax-score mask, thresholded at logit 0
    /// and nearest-upscaled from the decoder grid (input/4) to input size.
    pub fn predict_best(&self, embedding: &Tensor, prompts: &PromptSet) -> Result<MaskBitmap> {
        let pred = self.decode_prompts(embedding, prompts)?;
        let (_, mask) = select_best_mask(&pred);
        let factor = self.config.input_size / mask.width();
        if factor == 0 {
            return Err(Error::Shape(format!(
                "mask {} larger than input {}",
                mask.width(),
                self.config.input_size
            )));
        }
        Ok(mask.upscale(factor))
    }
}

impl Segmenter for Model {
    type Embedding = Tensor;

    fn embed(&self, image: &Tensor) -> Result<Tensor> {
        self.embed_image(image)
    }

    fn predict(&self, embedding: &Tensor, prompts: &PromptSet) -> Result<MaskBitmap> {
        self.predict_best(embedding, prompts)
    }

    fn input_size(&self) -> usize {
        self.config.input_size
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samhead::PointLabel;

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            name: "tiny".into(),
            input_size: 64,
            stage_depths: [1, 1, 1, 2, 1],
            stage_widths: [4, 8, 8, 16, 16],
            neck_width: 8,
            embed_dim: 16,
            head_dim: 8,
            stage4_scales: vec![],
            stage5_scales: vec![],
            ..ModelConfig::desk()
        };
        Model::new(cfg, 7).unwrap()
    }

    #[test]
    fn end_to_end_prediction_shapes() {
        let model = tiny_model();
        let mut rng = Rng::new(3);
        let image = Tensor::from_fn(&[3, 64, 64], |_| rng.next_f32());
        let emb = model.embed_image(&image).unwrap();
        assert_eq!(emb.shape(), &[16, 4, 4]);
        let prompts = PromptSet {
            points: vec![(32.0, 30.0, PointLabel::Foreground)],
            bbox: None,
        };
        let pred = model.decode_prompts(&emb, &prompts).unwrap();
        assert_eq!(pred.logits.shape(), &[3, 16, 16]);
        let mask = model.predict_best(&emb, &prompts).unwrap();
        assert_eq!((mask.width(), mask.height()), (64, 64));
    }

    #[test]
    fn same_seed_same_model() {
        let a = tiny_model();
        let b = tiny_model();
        assert_eq!(a.store.len(), b.store.len());
        for (ia, ib) in a.store.ids().zip(b.store.ids()) {
            assert_eq!(a.store.get(ia).data(), b.store.get(ib).data());
        }
    }

    #[test]
    fn end_to_end_gradient_reaches_stem() {
        let model = tiny_model();
        let mut rng = Rng::new(5);
        let image = Tensor::from_fn(&[3, 64, 64], |_| rng.next_f32());
        // Give the hypernetwork output layers signal so logits are nonzero.
        let mut model = model;
        for i in 0..3 {
            let id = model.store.by_name(&format!("dec.hyper{i}.l3.w")).unwrap();
            let shape = model.store.get(id).shape().to_vec();
            let mut r = Rng::new(50 + i as u64);
            model
                .store
                .set(id, Tensor::from_fn(&shape, |_| r.next_gaussian() * 0.3))
                .unwrap();
        }
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &model.store);
        let iv = tape.leaf(&image).unwrap();
        let emb = model.encode_values(&ctx, iv).unwrap();
        let prompts = PromptSet {
            points: vec![(20.0, 40.0, PointLabel::Foreground)],
            bbox: None,
        };
        let out = model.decode_values(&ctx, emb, &prompts).unwrap();
        let loss = out.logits.mul(out.logits).unwrap().mean_all().unwrap();
        let grads = tape.backward(loss).unwrap();
        let stem_leaf = ctx.used_leaf(model.encoder.stem.w).unwrap();
        let g = grads.dense(stem_leaf);
        assert!(
            g.iter().any(|&v| v != 0.0),
            "loss on logits reaches the earliest backbone stage"
        );
    }
}
