//! Train, fuse and detect on a tiny single-object set the model can memorize.

use rbdet::deploy::{fuse_model, infer, NmsConfig};
use rbdet::evalcli::{gen_synthetic, SynthConfig};
use rbdet::network::{Model, ModelConfig};
use rbdet::objective::box_iou;
use rbdet::trainer::{train, TrainConfig};

#[test]
fn memorized_objects_are_found_after_fusing() {
    let data = gen_synthetic(&SynthConfig {
        seed: 3,
        num_images: 16,
        max_objects: 1,
        min_side: 16,
        ..SynthConfig::default()
    })
    .unwrap();
    let config = TrainConfig {
        epochs: 200,
        batch_size: 4,
        flip_prob: 0.0,
        ..TrainConfig::default()
    };
    let model = Model::new(&ModelConfig::nano_desk(data.num_classes()), 0).unwrap();
    let ckpt = train(&config, model, &data).unwrap();
    let deployed = fuse_model(&ckpt).unwrap().to_model().unwrap();
    let nms = NmsConfig {
        conf_thresh: 0.1,
        ..NmsConfig::default()
    };

    let mut found = 0;
    for s in &data.samples {
        let dets = infer(&deployed, &s.image, config.input_size, &nms).unwrap();
        let gt = &s.gt.boxes[0];
        if dets
            .iter()
            .any(|d| d.class_id == s.gt.class_ids[0] && box_iou(&d.bbox, gt) >= 0.5)
        {
            found += 1;
        }
    }
    assert!(found >= 12, "only {found}/16 objects found");
}
