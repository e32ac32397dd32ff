//! Subcommand implementations: dataset generation, training, sampling
//! (unconstrained, part-guided, naive baseline), evaluation and SDF
//! reconstruction.

use crate::config::*;
use anyhow::{anyhow, bail, Context, Result};
use graspdiff_core::checkpoint::{load_checkpoint, save_checkpoint};
use graspdiff_core::dataset::{generate_dataset, load_dataset, DatasetSpecFile, GripperOverride};
use graspdiff_core::diffusion::{
    calibrate_delta, sample, sample_constrained, sample_naive_target, threshold_grasps,
    GraspCandidate, GraspCandidateJson, ModelField, NoiseSchedule, Provenance,
};
use graspdiff_core::eval::{
    evaluate_candidates, fc_percentage, pair_dual_arm, target_grasp_ratio, CandidateEval,
    GraspPair, GripperSpec,
};
use graspdiff_core::geometry::{
    farthest_point_sample, knn_region, load_mesh, normalize_cloud, read_ply_cloud, sample_surface,
    write_ply_cloud, write_ply_mesh, write_region_json, Bvh, Mesh, NormTransform, PointCloud,
    TargetRegion,
};
use graspdiff_core::model::{ModelWeights, ShapeContext};
use graspdiff_core::rng::stream_rng;
use graspdiff_core::se3::{Pose, PoseBounds};
use graspdiff_core::train::{prepare_training, train, validation_energies};
use graspdiff_core::triplane::VOLUME_BOUND;
use nalgebra::Vector3;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Normalized-volume pose bounds the samplers start from (the sampler
/// inflates them 1.5x itself).
fn unit_bounds() -> PoseBounds {
    PoseBounds::new(Vector3::zeros(), Vector3::repeat(0.5))
}

pub fn cmd_dataset(
    spec_path: Option<&Path>,
    out_dir: &Path,
    grasps: usize,
    seed: u64,
) -> Result<()> {
    let spec = match spec_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading dataset spec {}", p.display()))?;
            serde_json::from_str::<DatasetSpecFile>(&text)
                .with_context(|| format!("parsing dataset spec {}", p.display()))?
        }
        None => DatasetSpecFile {
            shapes: graspdiff_core::dataset::default_shape_specs(),
            grasps_per_shape: grasps,
            friction: graspdiff_core::eval::DEFAULT_FRICTION,
            gripper: GripperOverride::default(),
        },
    };
    if spec.shapes.is_empty() {
        bail!("dataset spec has no shapes");
    }
    if spec.grasps_per_shape == 0 {
        bail!("dataset spec field grasps_per_shape must be >= 1");
    }
    let manifest = generate_dataset(&spec, seed, out_dir)?;
    for s in &manifest.shapes {
        println!(
            "{}: {} grasps{} -> {}, {}",
            s.name,
            s.grasp_count,
            if s.complete { "" } else { " (budget hit)" },
            s.mesh_file,
            s.grasps_file
        );
    }
    println!("manifest: {}", out_dir.join("manifest.json").display());
    Ok(())
}

pub struct TrainArgs {
    pub dataset_dir: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub seed: u64,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub lambda_sdf: Option<f64>,
    pub scaled_loss: Option<bool>,
    pub resolution: Option<usize>,
    pub feat_dim: Option<usize>,
    pub checkpoint_every: Option<usize>,
}

pub fn cmd_train(args: &TrainArgs, file_cfg: &FileConfig, schedule: &NoiseSchedule) -> Result<()> {
    let (_, shapes) = load_dataset(&args.dataset_dir)?;
    if shapes.is_empty() {
        bail!("dataset at {} has no shapes", args.dataset_dir.display());
    }
    let mut cfg = resolve_train(file_cfg.train.as_ref(), args.seed);
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.lambda_sdf {
        cfg.lambda_sdf = v;
    }
    if let Some(v) = args.scaled_loss {
        cfg.scaled_loss = v;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    let gripper = resolve_gripper(file_cfg.gripper.as_ref());

    let prepared = prepare_training(&shapes, &cfg)?;
    let mut model = match &args.resume {
        Some(ckpt) => load_checkpoint(ckpt)?,
        None => {
            let mcfg = resolve_model(file_cfg.model.as_ref(), args.resolution, args.feat_dim);
            let mut rng = stream_rng(cfg.seed, 1);
            ModelWeights::init(&mcfg, gripper.query_cloud(), schedule.sigmas.clone(), &mut rng)
        }
    };

    let csv_path = loss_csv_path(&args.out);
    let mut epoch_offset = 0usize;
    if args.resume.is_some() && csv_path.exists() {
        let text = std::fs::read_to_string(&csv_path)?;
        epoch_offset = text.lines().skip(1).count();
    } else {
        std::fs::write(&csv_path, "epoch,loss_diff,loss_sdf,loss_total,lr\n")?;
    }
    let mut csv = std::fs::OpenOptions::new().append(true).open(&csv_path)?;

    let sidecar = serde_json::json!({
        "train": cfg,
        "schedule": schedule,
        "gripper": gripper,
        "dataset": args.dataset_dir.display().to_string(),
        "resolution": model.resolution,
        "feat_dim": model.feat_dim,
    });
    let out = args.out.clone();
    let every = cfg.checkpoint_every;
    let stats = train(&mut model, &prepared, &cfg, schedule, |row, m| {
        writeln!(
            csv,
            "{},{},{},{},{}",
            row.epoch + epoch_offset,
            row.loss_diff,
            row.loss_sdf,
            row.loss_total,
            row.lr
        )
        .expect("loss csv writable");
        csv.flush().expect("loss csv flush");
        println!(
            "epoch {:3}  loss_diff {:.5}  loss_sdf {:.5}",
            row.epoch + epoch_offset,
            row.loss_diff,
            row.loss_sdf
        );
        if every > 0 && (row.epoch + 1) % every == 0 {
            save_checkpoint(&out, m, Some(&sidecar)).expect("periodic checkpoint");
        }
    })
    .map_err(|e| anyhow!("{e}"))?;
    save_checkpoint(&args.out, &model, Some(&sidecar))?;
    println!(
        "saved {} after {} epochs (final loss_diff {:.5})",
        args.out.display(),
        stats.len() + epoch_offset,
        stats.last().map(|s| s.loss_diff).unwrap_or(f64::NAN)
    );

    // Calibration aid: validation-grasp energies at the smallest noise level.
    let smin = schedule.sigma_min();
    let mut energies = Vec::new();
    for shape in &prepared {
        energies.extend(validation_energies(&model, shape, smin).map_err(|e| anyhow!("{e}"))?);
    }
    if !energies.is_empty() {
        let delta90 = calibrate_delta(&energies, 90.0);
        println!(
            "validation energies: n={} p90={:.4} (a starting point for --delta)",
            energies.len(),
            delta90
        );
    }
    Ok(())
}

fn loss_csv_path(out: &Path) -> PathBuf {
    let mut os = out.as_os_str().to_owned();
    os.push(".loss.csv");
    PathBuf::from(os)
}

/// Loads the object input: a mesh file (obj, or ply with faces) is surface
/// sampled to `points`; a ply without faces is taken as the cloud itself.
pub struct ObjectInput {
    pub cloud: PointCloud,
    pub cloud_norm: PointCloud,
    pub transform: NormTransform,
}

pub fn load_object(path: &Path, points: usize, seed: u64) -> Result<ObjectInput> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    let cloud = match ext.as_deref() {
        Some("obj") => {
            let mesh = load_mesh(path)?;
            let mut rng = stream_rng(seed, 90);
            sample_surface(&mesh, points, &mut rng)
        }
        Some("ply") => match load_mesh(path) {
            Ok(mesh) => {
                let mut rng = stream_rng(seed, 90);
                sample_surface(&mesh, points, &mut rng)
            }
            Err(_) => read_ply_cloud(path)?.0,
        },
        other => bail!("unsupported input extension {other:?} (want obj or ply)"),
    };
    let (cloud_norm, transform) = normalize_cloud(&cloud)?;
    Ok(ObjectInput {
        cloud,
        cloud_norm,
        transform,
    })
}

pub fn write_grasps_json(path: &Path, candidates: &[GraspCandidate]) -> Result<()> {
    let json: Vec<GraspCandidateJson> = candidates.iter().map(|c| c.to_json()).collect();
    std::fs::write(path, serde_json::to_string_pretty(&json).expect("grasps serialize"))?;
    Ok(())
}

pub fn read_grasps_json(path: &Path) -> Result<Vec<GraspCandidate>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading grasps {}", path.display()))?;
    let json: Vec<GraspCandidateJson> =
        serde_json::from_str(&text).with_context(|| format!("parsing grasps {}", path.display()))?;
    json.iter()
        .map(|j| GraspCandidate::from_json(j).map_err(|e| anyhow!("bad grasp pose: {e}")))
        .collect()
}

/// Gripper marker mesh: the collision mesh instanced at every pose, each
/// vertex tagged with its grasp index.
pub fn write_markers(path: &Path, gripper: &GripperSpec, poses: &[Pose]) -> Result<()> {
    let base = gripper.collision_mesh();
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut labels = Vec::new();
    for (i, pose) in poses.iter().enumerate() {
        let offset = vertices.len() as u32;
        for v in base.vertices() {
            vertices.push(pose.apply(v));
            labels.push(i as i32);
        }
        for t in base.triangles() {
            triangles.push([t[0] + offset, t[1] + offset, t[2] + offset]);
        }
    }
    let mesh = Mesh::new(vertices, triangles).map_err(|e| anyhow!("marker mesh: {e}"))?;
    write_ply_mesh(path, &mesh, Some(("grasp_id", &labels)))?;
    Ok(())
}

pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub count: usize,
    pub out: PathBuf,
    pub markers: Option<PathBuf>,
    pub points: usize,
    pub seed: u64,
}

pub fn cmd_sample(args: &SampleArgs, schedule: &NoiseSchedule) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let object = load_object(&args.input, args.points, args.seed)?;
    let ctx = model
        .build_context(&object.cloud_norm, object.transform)
        .map_err(|e| anyhow!("{e}"))?;
    let field = ModelField {
        model: &model,
        ctx: &ctx,
    };
    let cands = sample(&field, &unit_bounds(), args.count, schedule, args.seed);
    let world = to_world(&cands, &object.transform);
    write_grasps_json(&args.out, &world)?;
    println!("wrote {} grasps to {}", world.len(), args.out.display());
    if let Some(markers) = &args.markers {
        let poses: Vec<Pose> = world.iter().map(|c| c.pose).collect();
        write_markers(markers, &GripperSpec::default(), &poses)?;
        println!("markers: {}", markers.display());
    }
    Ok(())
}

fn to_world(cands: &[GraspCandidate], transform: &NormTransform) -> Vec<GraspCandidate> {
    cands
        .iter()
        .map(|c| GraspCandidate {
            pose: transform.pose_to_world(&c.pose),
            ..c.clone()
        })
        .collect()
}

pub enum RegionSource {
    File(PathBuf),
    Auto { k: usize, count: usize },
}

pub struct SampleConstrainedArgs {
    pub base: SampleArgs,
    pub region: RegionSource,
    pub naive_baseline: bool,
}

pub fn cmd_sample_constrained(
    args: &SampleConstrainedArgs,
    schedule: &NoiseSchedule,
) -> Result<()> {
    let model = load_checkpoint(&args.base.checkpoint)?;
    let object = load_object(&args.base.input, args.base.points, args.base.seed)?;
    let ctx_full = model
        .build_context(&object.cloud_norm, object.transform)
        .map_err(|e| anyhow!("{e}"))?;

    let regions: Vec<TargetRegion> = match &args.region {
        RegionSource::File(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading region file {}", path.display()))?;
            let lists: Vec<Vec<usize>> = serde_json::from_str(&text)
                .with_context(|| format!("parsing region file {}", path.display()))?;
            if lists.is_empty() {
                bail!("region file {} holds no regions", path.display());
            }
            lists
                .into_iter()
                .map(|idx| {
                    if idx.iter().any(|&i| i >= object.cloud.len()) {
                        bail!(
                            "region index out of range for cloud of {} points",
                            object.cloud.len()
                        );
                    }
                    Ok(TargetRegion::from_indices(&object.cloud, idx))
                })
                .collect::<Result<Vec<_>>>()?
        }
        RegionSource::Auto { k, count } => {
            auto_regions(&object.cloud, *k, *count)
        }
    };

    if matches!(args.region, RegionSource::Auto { .. }) {
        let stem = args.base.out.with_extension("");
        let region_json = PathBuf::from(format!("{}_regions.json", stem.display()));
        write_region_json(&region_json, &regions)?;
        let region_ply = PathBuf::from(format!("{}_regions.ply", stem.display()));
        write_ply_cloud(&region_ply, &object.cloud, &regions)?;
        println!(
            "auto regions: {} and {}",
            region_json.display(),
            region_ply.display()
        );
    }

    for (r, region) in regions.iter().enumerate() {
        // The target region is encoded as a stand-alone cloud but in the
        // same normalized frame as the full cloud.
        let target_norm = object.transform.cloud_to_normalized(&region.cloud());
        let ctx_target = model
            .build_context(&target_norm, object.transform)
            .map_err(|e| anyhow!("{e}"))?;
        let full = ModelField {
            model: &model,
            ctx: &ctx_full,
        };
        let target = ModelField {
            model: &model,
            ctx: &ctx_target,
        };
        let cands = if args.naive_baseline {
            sample_naive_target(
                &full,
                &target,
                &unit_bounds(),
                args.base.count,
                schedule,
                args.base.seed,
            )
        } else {
            sample_constrained(
                &full,
                &target,
                &unit_bounds(),
                args.base.count,
                schedule,
                args.base.seed,
            )
        };
        let world = to_world(&cands, &object.transform);
        let out = region_out_path(&args.base.out, r, regions.len());
        write_grasps_json(&out, &world)?;
        println!(
            "region {r}: wrote {} grasps to {}",
            world.len(),
            out.display()
        );
        if let Some(markers) = &args.base.markers {
            let mpath = region_out_path(markers, r, regions.len());
            let poses: Vec<Pose> = world.iter().map(|c| c.pose).collect();
            write_markers(&mpath, &GripperSpec::default(), &poses)?;
        }
    }
    Ok(())
}

/// Farthest-point seeds plus kNN regions, k capped at the cloud size.
pub fn auto_regions(cloud: &PointCloud, k: usize, count: usize) -> Vec<TargetRegion> {
    let k = k.min(cloud.len());
    let seeds = farthest_point_sample(cloud, count, 0);
    seeds
        .into_iter()
        .map(|s| knn_region(cloud, s, k))
        .collect()
}

fn region_out_path(path: &Path, region: usize, total: usize) -> PathBuf {
    if total <= 1 {
        return path.to_path_buf();
    }
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("json");
    let stem = path.with_extension("");
    PathBuf::from(format!("{}_region{}.{}", stem.display(), region, ext))
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub fc_pct: f64,
    pub tg_pct: Option<f64>,
    pub se_pct: Option<f64>,
    pub cd: Option<f64>,
    pub candidates: usize,
    pub colliding: usize,
    pub pairs_total: usize,
    pub pair_fc_pct: Option<f64>,
    pub per_candidate: Vec<CandidateEval>,
    pub pairs: Vec<GraspPair>,
}

pub struct EvalArgs {
    pub grasps: PathBuf,
    pub mesh: PathBuf,
    pub region: Option<PathBuf>,
    pub out: PathBuf,
    pub csv: Option<PathBuf>,
    pub delta: Option<f64>,
    pub friction: f64,
    pub fc_eps: f64,
    pub fc_delta: f64,
    pub points: usize,
    pub seed: u64,
}

pub fn cmd_eval(args: &EvalArgs, gripper: &GripperSpec) -> Result<()> {
    let cands = read_grasps_json(&args.grasps)?;
    let mesh = load_mesh(&args.mesh)?;
    let bvh = Bvh::build(&mesh);
    let poses: Vec<Pose> = cands.iter().map(|c| c.pose).collect();

    let region_points: Option<Vec<Vector3<f64>>> = match &args.region {
        None => None,
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let lists: Vec<Vec<usize>> = serde_json::from_str(&text)
                .with_context(|| format!("parsing region file {}", path.display()))?;
            let mut rng = stream_rng(args.seed, 90);
            let cloud = sample_surface(&mesh, args.points, &mut rng);
            let mut pts = Vec::new();
            for list in lists {
                for i in list {
                    if i >= cloud.len() {
                        bail!("region index {i} out of range");
                    }
                    pts.push(cloud.points()[i]);
                }
            }
            Some(pts)
        }
    };

    let evals = evaluate_candidates(
        &bvh,
        gripper,
        &poses,
        region_points.as_deref(),
        args.friction,
        args.fc_eps,
        args.fc_delta,
    );
    let fc_pct = fc_percentage(&evals);
    let tg_pct = region_points.as_ref().map(|r| {
        let centers: Vec<Vector3<f64>> = poses
            .iter()
            .map(|p| p.apply(&gripper.grasp_center_local()))
            .collect();
        target_grasp_ratio(&centers, r, gripper.finger_length)
    });
    let se_pct = args.delta.map(|d| threshold_grasps(&cands, d).1);
    let pairs = pair_dual_arm(
        &bvh,
        gripper,
        &poses,
        args.friction,
        args.fc_eps,
        args.fc_delta,
        None,
    );
    let pair_fc_pct = if pairs.is_empty() {
        None
    } else {
        Some(100.0 * pairs.iter().filter(|p| p.joint_force_closure).count() as f64 / pairs.len() as f64)
    };

    let report = EvalReport {
        fc_pct,
        tg_pct,
        se_pct,
        cd: None,
        candidates: evals.len(),
        colliding: evals.iter().filter(|e| e.collides).count(),
        pairs_total: pairs.len(),
        pair_fc_pct,
        per_candidate: evals,
        pairs,
    };
    std::fs::write(
        &args.out,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    println!(
        "fc_pct {:.2}  tg_pct {}  se_pct {}  candidates {}  pairs {}",
        report.fc_pct,
        report
            .tg_pct
            .map_or("null".into(), |v| format!("{v:.2}")),
        report
            .se_pct
            .map_or("null".into(), |v| format!("{v:.2}")),
        report.candidates,
        report.pairs_total,
    );
    if let Some(csv) = &args.csv {
        let new = !csv.exists();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(csv)?;
        if new {
            writeln!(f, "grasps,mesh,candidates,fc_pct,tg_pct,se_pct,pairs,pair_fc_pct")?;
        }
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            args.grasps.display(),
            args.mesh.display(),
            report.candidates,
            report.fc_pct,
            report.tg_pct.map_or(String::new(), |v| v.to_string()),
            report.se_pct.map_or(String::new(), |v| v.to_string()),
            report.pairs_total,
            report.pair_fc_pct.map_or(String::new(), |v| v.to_string()),
        )?;
    }
    Ok(())
}

pub struct ReconstructArgs {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub out: PathBuf,
    pub grid: usize,
    pub points: usize,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
struct ReconstructReport {
    cd: f64,
    cd_x1e4: f64,
    surface_points: usize,
}

pub fn cmd_reconstruct(args: &ReconstructArgs, schedule: &NoiseSchedule) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let object = load_object(&args.input, args.points, args.seed)?;
    let ctx = model
        .build_context(&object.cloud_norm, object.transform)
        .map_err(|e| anyhow!("{e}"))?;
    let pts_norm = extract_sdf_surface(&model, &ctx, args.grid, schedule.sigma_min());
    if pts_norm.is_empty() {
        bail!("the SDF head produced no zero crossings on the grid");
    }
    let cd = graspdiff_core::eval::chamfer(&pts_norm, object.cloud_norm.points());
    let world: Vec<Vector3<f64>> = pts_norm
        .iter()
        .map(|p| object.transform.to_world(p))
        .collect();
    write_ply_cloud(&args.out, &PointCloud::new(world), &[])?;
    let report = ReconstructReport {
        cd,
        cd_x1e4: cd * 1e4,
        surface_points: pts_norm.len(),
    };
    let report_path = args.out.with_extension("report.json");
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    println!(
        "reconstructed {} surface points, CD {:.6} (x1e4 = {:.2}) vs input cloud",
        report.surface_points, report.cd, report.cd_x1e4
    );
    Ok(())
}

/// Zero crossings of the SDF head along grid edges, in normalized space.
pub fn extract_sdf_surface(
    model: &ModelWeights,
    ctx: &ShapeContext,
    grid: usize,
    sigma: f64,
) -> Vec<Vector3<f64>> {
    assert!(grid >= 2);
    let n = grid;
    let coord = |i: usize| -VOLUME_BOUND + 2.0 * VOLUME_BOUND * i as f64 / (n - 1) as f64;
    // Evaluate the SDF plane by plane, batched.
    let mut values = vec![0.0f64; n * n * n];
    let idx = |x: usize, y: usize, z: usize| (x * n + y) * n + z;
    for x in 0..n {
        let mut pts = Vec::with_capacity(n * n);
        for y in 0..n {
            for z in 0..n {
                pts.push(Vector3::new(coord(x), coord(y), coord(z)));
            }
        }
        let sdf = model.sdf_batch(ctx, &pts, sigma);
        for y in 0..n {
            for z in 0..n {
                values[idx(x, y, z)] = sdf[y * n + z];
            }
        }
    }
    let mut out = Vec::new();
    let mut push_crossing = |a: Vector3<f64>, b: Vector3<f64>, va: f64, vb: f64| {
        if va == 0.0 {
            out.push(a);
        } else if va * vb < 0.0 {
            let t = va / (va - vb);
            out.push(a + (b - a) * t);
        }
    };
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                let p = Vector3::new(coord(x), coord(y), coord(z));
                let v = values[idx(x, y, z)];
                if x + 1 < n {
                    let q = Vector3::new(coord(x + 1), coord(y), coord(z));
                    push_crossing(p, q, v, values[idx(x + 1, y, z)]);
                }
                if y + 1 < n {
                    let q = Vector3::new(coord(x), coord(y + 1), coord(z));
                    push_crossing(p, q, v, values[idx(x, y + 1, z)]);
                }
                if z + 1 < n {
                    let q = Vector3::new(coord(x), coord(y), coord(z + 1));
                    push_crossing(p, q, v, values[idx(x, y, z + 1)]);
                }
            }
        }
    }
    out
}
