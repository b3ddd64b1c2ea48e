use promptseg::backbone::ModelConfig;
use promptseg::data::gen_dataset;
use promptseg::eval::iou;
use promptseg::model::Model;
use promptseg::samhead::PromptSet;
use promptseg::train::{preprocess, train_loop, LossConfig, TrainConfig, TrainItem};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(200);
    let lr: f32 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let seed: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0);

    let scenes = gen_dataset(11, 1, 128, 1).unwrap();
    let scene = &scenes[0];
    println!("instance area: {} px ({:.1}% of image)", scene.instances[0].mask.area(),
        100.0 * scene.instances[0].mask.area() as f32 / (128.0 * 128.0));

    let mut model = Model::new(ModelConfig::desk(), seed).unwrap();
    let items = vec![TrainItem {
        image: scene.image.clone(),
        masks: vec![scene.instances[0].mask.clone()],
    }];
    let tcfg = TrainConfig {
        epochs: steps,
        batch_size: 1,
        lr_init: lr,
        hflip_prob: 0.0,
        weight_decay: 0.0,
        seed: 1,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let trace = train_loop(&mut model, &items, &tcfg, &LossConfig::default(), None).unwrap();
    let train_time = t0.elapsed().as_secs_f64();
    println!("trained {} steps in {:.1}s ({:.0} ms/step), loss {:.4} -> {:.4}",
        trace.len(), train_time, 1000.0 * train_time / trace.len() as f64,
        trace.first().unwrap().total, trace.last().unwrap().total);

    // Box-prompt IoU on the training image.
    let (img, masks, _) = preprocess(&items[0].image, &items[0].masks, 128, false).unwrap();
    let gt = &masks[0];
    let (x0, y0, x1, y1) = gt.tight_box().unwrap();
    let emb = model.embed_image(&img).unwrap();
    let prompts = PromptSet {
        points: vec![],
        bbox: Some((x0 as f32, y0 as f32, x1 as f32, y1 as f32)),
    };
    let pred = model.predict_best(&emb, &prompts).unwrap();
    println!("box-prompt IoU: {:.4}", iou(&pred, gt).unwrap());
}
