use keycap_web::demo::{options, score_caption, Demo};

#[test]
fn identical_caption_scores_one() {
    let s = score_caption("the optic disc shows glaucoma", "the optic disc shows glaucoma").unwrap();
    assert_eq!(s.bleu, [1.0; 4]);
    assert_eq!(s.rouge_l, 1.0);
    assert!(score_caption("a b", "\n\n").is_err());
}

#[test]
fn attention_rows_are_causal_distributions() {
    let demo = Demo::new(1).unwrap();
    let view = demo.attention("glaucoma, severe").unwrap();
    assert_eq!(view.tokens, ["glaucoma", "<sep>", "severe"]);
    for heads in &view.weights {
        for w in heads {
            for (q, row) in w.iter().enumerate() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row[q + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn training_lowers_loss_and_captions_decode() {
    let mut demo = Demo::new(2).unwrap();
    let first = demo.train_epoch().unwrap();
    let mut last = first;
    for _ in 0..9 {
        last = demo.train_epoch().unwrap();
    }
    assert_eq!(demo.epochs(), 10);
    assert!(last < first, "{first} -> {last}");
    let caption = demo.caption(1, 2, "glaucoma, mild", 3, false, false).unwrap();
    assert!(!caption.is_empty());
    assert!(demo.caption(9, 0, "glaucoma", 1, false, false).is_err());
    assert_eq!(options().diseases.len(), 4);
}

#[test]
fn cider_uses_a_background_corpus() {
    let s = score_caption("the optic disc shows glaucoma", "the optic disc shows glaucoma with a cup").unwrap();
    assert!(s.cider > 0.0);
    let exact = score_caption("a b c d", "a b c d").unwrap();
    assert!((exact.cider - 1.0).abs() < 1e-12);
}
