use memtrack::fusion::{fuse_flops, Ratio};
use memtrack::pipeline::{
    encode_image, run_video, Engine, EngineConfig, MemoryMode, SyntheticVideo, VideoSpec,
};
use memtrack::{Error, Matrix};

fn desk(mode: MemoryMode, seed: u64) -> EngineConfig {
    EngineConfig {
        mode,
        seed,
        ..EngineConfig::desk()
    }
}

fn video(cfg: &EngineConfig, frames: usize) -> SyntheticVideo {
    let (h, w) = cfg.image_dims();
    SyntheticVideo::generate(VideoSpec::new(frames, h, w, 11)).unwrap()
}

#[test]
fn first_frame_is_memoryless() {
    let cfg = desk(MemoryMode::Compressed, 1);
    let engine = Engine::<f64>::new(cfg.clone()).unwrap();
    let v = video(&cfg, 1);
    let run = run_video(&engine, &v, v.point_prompt().as_ref()).unwrap();
    let o = &run.outputs[0];
    assert_eq!(o.f_m, o.f16);
    assert_eq!(o.fuse_macs.total_macs(), 0);
    assert_eq!(o.mem_tokens, 0);
}

#[test]
fn bank_trajectory_and_footprint() {
    let cfg = desk(MemoryMode::Compressed, 2);
    let t_cap = cfg.frame_capacity;
    let engine = Engine::<f64>::new(cfg.clone()).unwrap();
    let run = run_video(&engine, &video(&cfg, t_cap + 3), None).unwrap();
    for (t, o) in run.outputs.iter().enumerate() {
        assert_eq!(o.bank_frames, t.min(t_cap));
        assert_eq!(o.stored_tokens, cfg.num_global + cfg.num_spatial);
    }
    // Bank after the last push.
    let mut state = engine.new_state().unwrap();
    for (t, f) in video(&cfg, t_cap + 3).frames.iter().enumerate() {
        engine.step(&mut state, t, &f.image, None).unwrap();
    }
    assert_eq!(state.bank.len(), t_cap);
    assert!(state.bank.frames().all(|f| f.is_compressed()));

    let dense = Engine::<f64>::new(desk(MemoryMode::Dense, 2)).unwrap();
    let d = run_video(&dense, &video(&cfg, 1), None).unwrap();
    let ratio = Ratio::new(
        run.outputs[0].stored_tokens as u64,
        d.outputs[0].stored_tokens as u64,
    );
    assert_eq!(ratio, Some(Ratio { num: 1, den: 4 }));
}

#[test]
fn traces_match_closed_form_in_both_modes() {
    let frames = 10;
    let mut runs = Vec::new();
    for mode in [MemoryMode::Dense, MemoryMode::Compressed] {
        let cfg = desk(mode, 3);
        let engine = Engine::<f64>::new(cfg.clone()).unwrap();
        let run = run_video(&engine, &video(&cfg, frames), None).unwrap();
        for o in &run.outputs {
            let shape = engine.fuse_shape(o.bank_frames, o.attended_pointers);
            let flops = fuse_flops(&shape);
            let want = match mode {
                MemoryMode::Dense => flops.dense,
                MemoryMode::Compressed => flops.compressed,
            };
            if o.bank_frames == 0 {
                assert_eq!(o.fuse_macs.total_macs(), 0);
            } else {
                assert_eq!(o.fuse_macs, want);
            }
        }
        runs.push(run);
    }
    let (dense, compressed) = (&runs[0], &runs[1]);
    for (d, c) in dense.outputs.iter().zip(&compressed.outputs).skip(1) {
        assert_eq!(d.mask_logits.shape(), c.mask_logits.shape());
        assert_ne!(d.mask_logits, c.mask_logits);
        // Without pointers the cross-attention ratio would be exactly
        // HW/(Ng+Nl) = 4; each attended pointer adds one key to both.
        let p = d.attended_pointers as u64;
        let frames = d.bank_frames as u64;
        assert_eq!(
            d.fuse_macs.cross_attn * (frames * 64 + p),
            c.fuse_macs.cross_attn * (frames * 256 + p)
        );
        assert_eq!(d.fuse_macs.self_attn, c.fuse_macs.self_attn);
    }
    assert_eq!(
        dense.outputs[0].mask_logits,
        compressed.outputs[0].mask_logits
    );
}

#[test]
fn pointer_free_ratio_is_exact() {
    let mut cfgs = Vec::new();
    for mode in [MemoryMode::Dense, MemoryMode::Compressed] {
        let mut cfg = desk(mode, 4);
        cfg.include_pointers = false;
        cfgs.push(cfg);
    }
    let cross: Vec<Vec<u64>> = cfgs
        .iter()
        .map(|cfg| {
            let e = Engine::<f64>::new(cfg.clone()).unwrap();
            run_video(&e, &video(cfg, 6), None)
                .unwrap()
                .trace
                .iter()
                .map(|r| r.cross_mac)
                .collect()
        })
        .collect();
    for (d, c) in cross[0].iter().zip(&cross[1]).skip(1) {
        assert_eq!(*d, 4 * c);
    }
}

#[test]
fn seeds_control_outputs() {
    let cfg = desk(MemoryMode::Compressed, 5);
    let v = video(&cfg, 3);
    let masks = |seed| {
        let e = Engine::<f64>::new(desk(MemoryMode::Compressed, seed)).unwrap();
        run_video(&e, &v, v.mask_prompt().as_ref())
            .unwrap()
            .outputs
            .into_iter()
            .map(|o| o.mask_logits)
            .collect::<Vec<_>>()
    };
    assert_eq!(masks(5), masks(5));
    assert_ne!(masks(5), masks(6));
}

#[test]
fn single_precision_tracks_double() {
    let cfg = desk(MemoryMode::Compressed, 7);
    let v = video(&cfg, 3);
    let a = run_video(&Engine::<f64>::new(cfg.clone()).unwrap(), &v, None).unwrap();
    let b = run_video(&Engine::<f32>::new(cfg).unwrap(), &v, None).unwrap();
    for (x, y) in a.outputs.iter().zip(&b.outputs) {
        let d = x.mask_logits.max_abs_diff(&y.mask_logits.cast()).unwrap();
        assert!(d < 1e-3, "{d}");
        assert_eq!(x.fuse_macs, y.fuse_macs);
    }
}

#[test]
fn encoder_is_bit_stable() {
    let cfg = desk(MemoryMode::Dense, 8);
    let a = Engine::<f64>::new(cfg.clone()).unwrap();
    let b = Engine::<f64>::new(cfg.clone()).unwrap();
    let img = &video(&cfg, 1).frames[0].image;
    assert_eq!(
        encode_image(img, &a.encoder).unwrap(),
        encode_image(img, &b.encoder).unwrap()
    );
}

#[test]
fn step_contract() {
    let cfg = desk(MemoryMode::Dense, 9);
    let engine = Engine::<f64>::new(cfg.clone()).unwrap();
    let mut state = engine.new_state().unwrap();
    let (h, w) = cfg.image_dims();
    let img = Matrix::zeros(h, w);
    let out = engine.step(&mut state, 0, &img, None).unwrap();
    assert_eq!(out.mask_logits.shape(), (h, w));
    assert!(out.mask_logits.as_slice().iter().all(|&v| v == 0.0));
    assert!(matches!(
        engine.step(&mut state, 0, &img, None),
        Err(Error::OutOfOrder { .. })
    ));
    assert_eq!(state.last_frame(), Some(0));
    engine.step(&mut state, 5, &img, None).unwrap();
    assert_eq!(state.bank.len(), 2);
}

#[test]
fn occluded_frames_flow_through() {
    let cfg = desk(MemoryMode::Compressed, 10);
    let (h, w) = cfg.image_dims();
    let mut spec = VideoSpec::new(6, h, w, 2);
    spec.occluded = Some(2..4);
    let v = SyntheticVideo::generate(spec).unwrap();
    let run = run_video(
        &Engine::<f64>::new(cfg).unwrap(),
        &v,
        v.point_prompt().as_ref(),
    )
    .unwrap();
    assert_eq!(run.outputs.len(), 6);
    assert!(run.outputs.iter().all(|o| o.mask_logits.is_finite()));
}
