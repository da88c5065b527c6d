/// Small end-to-end configuration: two sites, few clips, a tiny network.
pub const SMOKE_CONFIG: &str = r#"{
  "scene": {
    "sites": [
      {"tx": [0, 0, 1], "rxs": [[3, -1, 1], [3.5, 0, 1], [3, 1, 1]],
       "spots": [[0.4, 0.2, 0.2, 0.2], [0.25, 0.25, 0.25, 0.25]]},
      {"tx": [0, 0, 1], "rxs": [[4, -1.5, 1], [4.5, 0, 1], [4, 1.5, 1]],
       "spots": [[0.4, 0.2, 0.2, 0.2], [0.25, 0.25, 0.25, 0.25]]}
    ],
    "orientations_deg": [0, 90],
    "actions": ["squat", "jump"],
    "repetitions": 1,
    "frames_per_clip": 8,
    "frame_rate": 30,
    "placement_jitter": 0.1,
    "noise_std": 1e-5,
    "drift_step_std": 0.02
  },
  "model": {
    "d_model": 16, "layers": 1, "heads": 2, "ffn_dim": 16, "dropout": 0.1, "joints": 17,
    "receivers": 3, "seq_len": 4, "conv_base": 4, "conv_blocks": 2, "in_channels": 3,
    "map_size": 16, "bands": 4, "extent": 10.0, "head_hidden": [32]
  },
  "train": {
    "lr_init": 0.001, "lr_final": 0.00001, "epochs": 2, "batch_size": 4, "weight_decay": 0.00001,
    "beta1": 0.9, "beta2": 0.999, "adam_eps": 1e-8, "geometry_noise": 0.0, "seed": 0
  },
  "split": {"protocol": "cross_layout", "held_out": 1, "seed": 0},
  "sigmas_m": [0.0, 0.5]
}"#;

