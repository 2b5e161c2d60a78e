use worldmodel_core::env::dataset::{episode_file_name, DatasetReader};
use worldmodel_core::env::{
    collect_rollouts, load_dataset, run_episodes, EnvId, EnvPool, Environment, EpisodeRecord, RandomAgent, TrackToy,
};

fn random_survival(seeds: &[u64], burst: f64) -> Vec<f64> {
    let kinds = EnvId::DodgeToy.spec().actions;
    let agent = RandomAgent::new(kinds, burst).with_seeds(seeds);
    run_episodes(EnvPool::new(EnvId::DodgeToy), agent, seeds)
        .unwrap()
        .iter()
        .map(|o| o.total_reward)
        .collect()
}

#[test]
fn dodge_random_policy_survives_a_few_hundred_steps() {
    let seeds: Vec<u64> = (0..200).collect();
    let s = random_survival(&seeds, 10.0);
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    eprintln!("dodge random survival mean {mean:.1}");
    assert!((150.0..=300.0).contains(&mean), "{mean}");
}

#[test]
fn track_seeds_give_different_first_frames() {
    let mut env = TrackToy::new();
    let mut distinct = 0;
    for i in 0..100u64 {
        let a = env.reset(2 * i);
        let b = env.reset(2 * i + 1);
        if a != b {
            distinct += 1;
        }
    }
    assert!(distinct >= 99, "{distinct}");
}

#[test]
fn episode_bytes_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let seeds = [11u64, 12];
    collect_rollouts(EnvId::TrackToy, 2, |i| seeds[i], 2, dir.path().join("d"), serde_json::json!({}), |s| {
        Ok(RandomAgent::new(EnvId::TrackToy.spec().actions, 1.0).with_seeds(s))
    })
    .unwrap();
    let reader = DatasetReader::open(dir.path().join("d")).unwrap();
    for i in 0..2 {
        let path = dir.path().join("d").join(episode_file_name(i));
        let bytes = std::fs::read(&path).unwrap();
        let rec = EpisodeRecord::from_bytes(EnvId::TrackToy, &bytes, &path).unwrap();
        assert_eq!(rec.to_bytes(), bytes);
        assert_eq!(reader.read(i).unwrap(), rec);
        assert_eq!(rec.seed, seeds[i]);
    }
}

#[test]
fn collect_single_episode_writes_one_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("one");
    let summary = collect_rollouts(EnvId::DodgeToy, 1, |_| 3, 8, &out, serde_json::json!({"policy": "random"}), |s| {
        Ok(RandomAgent::new(EnvId::DodgeToy.spec().actions, 10.0).with_seeds(s))
    })
    .unwrap();
    let files: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".bin"))
        .collect();
    assert_eq!(files, vec![episode_file_name(0)]);
    let (m, eps) = load_dataset(&out).unwrap();
    assert_eq!(m.episodes, 1);
    assert_eq!(eps[0].len(), summary.total_frames);
    assert_eq!(*eps[0].dones.last().unwrap(), true);
}

#[test]
fn collect_refuses_non_empty_directory() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("x"), b"x").unwrap();
    let r = collect_rollouts(EnvId::DodgeToy, 1, |_| 3, 1, dir.path(), serde_json::json!({}), |s| {
        Ok(RandomAgent::new(EnvId::DodgeToy.spec().actions, 1.0).with_seeds(s))
    });
    assert!(r.is_err());
    assert!(dir.path().join("x").exists());
}

#[test]
fn batched_collection_matches_single_episodes() {
    let seeds = [5u64, 6, 7];
    let kinds = EnvId::DodgeToy.spec().actions;
    let batched = run_episodes(EnvPool::new(EnvId::DodgeToy), RandomAgent::new(kinds.clone(), 10.0).with_seeds(&seeds), &seeds).unwrap();
    for (i, &s) in seeds.iter().enumerate() {
        let one = run_episodes(EnvPool::new(EnvId::DodgeToy), RandomAgent::new(kinds.clone(), 10.0).with_seeds(&[s]), &[s]).unwrap();
        assert_eq!(one[0], batched[i]);
    }
}

#[test]
fn real_env_step_matches_pool() {
    let mut env = EnvId::TrackToy.make();
    let f = env.reset(4);
    let mut pool = EnvPool::new(EnvId::TrackToy);
    use worldmodel_core::env::BatchEnv;
    assert_eq!(pool.reset(&[4]).unwrap()[0], f);
}
