// inhand - reconstruction of hand-held objects from monocular video
// SPDX-License-Identifier: Apache-2.0
//
// Pipeline entry point: dataset generation, hand tracking, dense
// reconstruction, evaluation, and the ablation ladder. Numeric knobs live in
// JSON configs; flags select files and ablation toggles. Exit codes: 0
// success, 2 usage/input error, 3 numerical failure.

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "inhand/mesh_eval.hpp"
#include "inhand/synthetic_scenes.hpp"
#include "inhand/trainer.hpp"

namespace fs = std::filesystem;
using namespace inhand;

namespace {

constexpr const char* kToolVersion = "0.1.0";

struct Timer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

nlohmann::json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  nlohmann::json j;
  in >> j;
  return j;
}

/// RunManifest: command, config hash (over the serialized config bytes),
/// seed, inputs/outputs, timings, tool version.
void write_run_manifest(const std::string& out_dir, const std::string& command,
                        const nlohmann::json& config_used, std::uint64_t seed,
                        const nlohmann::json& inputs, const nlohmann::json& outputs,
                        double seconds) {
  nlohmann::json manifest{{"command", command},
                          {"config_hash", hex64(fnv1a64(config_used.dump()))},
                          {"seed", seed},
                          {"inputs", inputs},
                          {"outputs", outputs},
                          {"tool_version", kToolVersion},
                          {"timings", {{"wall_seconds", seconds}}}};
  std::ofstream out(out_dir + "/run_manifest.json");
  out << manifest.dump(2) << "\n";
}

struct TrackingRunConfig {
  std::uint64_t seed = 7;
  double init_noise_deg = 5.0;
  double init_noise_frac = 0.05;
  double temporal = 1e-4;
  double regularization = 5e-4;
  int max_iterations = 200;
};

TrackingRunConfig tracking_config_from_json(const nlohmann::json& j) {
  TrackingRunConfig c;
  c.seed = j.value("seed", c.seed);
  c.init_noise_deg = j.value("init_noise_deg", c.init_noise_deg);
  c.init_noise_frac = j.value("init_noise_frac", c.init_noise_frac);
  c.temporal = j.value("temporal", c.temporal);
  c.regularization = j.value("regularization", c.regularization);
  c.max_iterations = j.value("max_iterations", c.max_iterations);
  return c;
}

HandSequenceParams perturbed_init(const HandSequenceParams& gt, const TrackingRunConfig& cfg) {
  Pcg32 rng(cfg.seed, 0x1417ULL);
  HandSequenceParams init = gt;
  for (auto& f : init.frames) {
    Vec3 axis(rng.normal(), rng.normal(), rng.normal());
    axis.normalize();
    f.root.rotation = rodrigues(axis * deg2rad(cfg.init_noise_deg)) * f.root.rotation;
    Vec3 dir(rng.normal(), rng.normal(), rng.normal());
    dir.normalize();
    f.root.translation += dir * (cfg.init_noise_frac * f.root.translation.norm());
  }
  return init;
}

// -------------------------------------------------------------------------
// generate
// -------------------------------------------------------------------------

int cmd_generate(const std::string& spec_path, const std::string& out_dir) {
  Timer timer;
  nlohmann::json spec_json;
  SceneSpec spec;
  try {
    spec_json = load_json(spec_path);
    spec = spec_json.get<SceneSpec>();
  } catch (const std::exception& e) {
    std::cerr << "generate: invalid scene spec " << spec_path << ": " << e.what() << "\n";
    return 2;
  }
  if (spec.frames < 2) {
    std::cerr << "generate: spec field 'frames' must be >= 2\n";
    return 2;
  }
  if (spec.width <= 0 || spec.height <= 0) {
    std::cerr << "generate: spec fields 'width'/'height' must be positive\n";
    return 2;
  }
  try {
    fs::create_directories(out_dir);
    nlohmann::json manifest = export_dataset(spec, out_dir);
    write_run_manifest(out_dir, "generate", nlohmann::json(spec), spec.seed,
                       {{"spec", spec_path}}, {{"dataset", out_dir}}, timer.seconds());
    std::cout << "generate: wrote " << spec.frames << " frames to " << out_dir << "\n";
  } catch (const std::exception& e) {
    std::cerr << "generate: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

// -------------------------------------------------------------------------
// track
// -------------------------------------------------------------------------

int cmd_track(const std::string& data_dir, const std::string& out_dir,
              const std::string& config_path, const std::string& init_path, bool no_share) {
  Timer timer;
  TrackingRunConfig cfg;
  nlohmann::json cfg_json = nlohmann::json::object();
  try {
    if (!config_path.empty()) {
      cfg_json = load_json(config_path);
      cfg = tracking_config_from_json(cfg_json);
    }
  } catch (const std::exception& e) {
    std::cerr << "track: invalid config: " << e.what() << "\n";
    return 2;
  }

  KeypointObservations obs;
  Camera camera;
  HandSequenceParams init;
  bool have_gt = false;
  HandSequenceParams gt;
  try {
    obs = load_keypoints_jsonl(data_dir + "/keypoints.jsonl");
    nlohmann::json manifest = load_json(data_dir + "/manifest.json");
    camera = Camera::from_image_size(manifest.at("width").get<int>(),
                                     manifest.at("height").get<int>());
    if (fs::exists(data_dir + "/gt/poses.json")) {
      gt = load_sequence_params(data_dir + "/gt/poses.json");
      have_gt = true;
    }
    if (!init_path.empty()) {
      init = load_sequence_params(init_path);
    } else if (have_gt) {
      init = perturbed_init(gt, cfg);
    } else {
      std::cerr << "track: no --init file and the dataset has no ground-truth poses\n";
      return 2;
    }
  } catch (const std::exception& e) {
    std::cerr << "track: " << e.what() << "\n";
    return 2;
  }

  try {
    fs::create_directories(out_dir);
    TrackingWeights weights{cfg.temporal, cfg.regularization};
    FitOptions options;
    options.lbfgs.max_iterations = cfg.max_iterations;

    FitResult result;
    if (no_share) {
      result = fit_per_frame(obs, camera, weights, init, options);
    } else {
      result = fit_sequence(obs, camera, weights, init, options);
    }
    save_sequence_params(result.params, out_dir + "/poses.json");
    save_convergence_csv(result.report, out_dir + "/convergence.csv");

    nlohmann::json report{{"share_parameters", !no_share},
                          {"total_iterations", result.report.total_iterations},
                          {"behind_camera_points", result.report.behind_camera_points}};
    nlohmann::json stages = nlohmann::json::array();
    for (const auto& s : result.report.stages)
      stages.push_back({{"stage", s.stage},
                        {"iterations", s.iterations},
                        {"initial_energy", s.initial_energy},
                        {"final_energy", s.final_energy},
                        {"status", s.status}});
    report["stages"] = stages;
    report["final_e2d"] = energy_2d(result.params, obs, camera);
    if (have_gt) {
      double rot_err = 0, trans_err = 0;
      for (std::size_t t = 0; t < gt.frames.size(); ++t) {
        rot_err += rad2deg(rotation_angle_between(result.params.frames[t].root.rotation,
                                                  gt.frames[t].root.rotation));
        trans_err += (result.params.frames[t].root.translation -
                      gt.frames[t].root.translation).norm() /
                     gt.frames[t].root.translation.norm();
      }
      report["mean_rotation_error_deg"] = rot_err / gt.frames.size();
      report["mean_translation_error_frac"] = trans_err / gt.frames.size();
      report["mean_joint_error"] = mean_joint_error(result.params, gt);
    }
    {
      std::ofstream out(out_dir + "/track_report.json");
      out << report.dump(2) << "\n";
    }
    write_run_manifest(out_dir, "track", cfg_json, cfg.seed,
                       {{"data", data_dir}, {"init", init_path}},
                       {{"poses", out_dir + "/poses.json"}}, timer.seconds());
    std::cout << "track: " << (no_share ? "per-frame" : "shared") << " fit, "
              << result.report.total_iterations << " iterations, final E2D "
              << report["final_e2d"].get<double>() << "\n";
  } catch (const std::exception& e) {
    std::cerr << "track: " << e.what() << "\n";
    return 3;
  }
  return 0;
}

// -------------------------------------------------------------------------
// reconstruct
// -------------------------------------------------------------------------

void apply_ablation(TrainConfig* cfg, const std::string& variant) {
  if (variant == "vanilla") {
    cfg->refine_poses = false;
    cfg->use_deformation = false;
    cfg->guided_sampling = false;
  } else if (variant == "camera") {
    cfg->refine_poses = true;
    cfg->use_deformation = false;
    cfg->guided_sampling = false;
  } else if (variant == "deformation") {
    cfg->refine_poses = true;
    cfg->use_deformation = true;
    cfg->guided_sampling = false;
  } else if (variant == "guiding") {
    cfg->refine_poses = true;
    cfg->use_deformation = true;
    cfg->guided_sampling = true;
  } else if (!variant.empty()) {
    throw std::runtime_error("unknown ablation variant: " + variant);
  }
}

template <typename S>
int run_reconstruction(const TrainDataset& ds_in, TrainConfig cfg,
                       const nlohmann::json& cfg_json, const std::string& data_dir,
                       const std::string& poses_path, const std::string& out_dir,
                       const std::string& resume_path) {
  Timer timer;
  TrainDataset ds = ds_in;
  perturb_dataset_poses(&ds, cfg);

  TrainResult<S> result = train_field<S>(ds, cfg, out_dir, resume_path);
  save_train_log(result.log, out_dir + "/train_log.csv");

  // Debug render triplets on evenly spaced frames.
  fs::create_directories(out_dir + "/renders");
  int eval_count = std::min(4, ds.frames);
  char name[64];
  for (int e = 0; e < eval_count; ++e) {
    int frame = ds.frames <= 1 ? 0 : e * (ds.frames - 1) / std::max(1, eval_count - 1);
    ViewRender view =
        render_view(result.params, ds, frame, 1.0, cfg.samples_per_ray, 9, cfg.threads);
    std::snprintf(name, sizeof(name), "/renders/%04d_color.png", frame);
    write_png(view.color, out_dir + name);
    std::snprintf(name, sizeof(name), "/renders/%04d_weight.png", frame);
    write_png(view.weight, out_dir + name);
    std::snprintf(name, sizeof(name), "/renders/%04d_sem.png", frame);
    write_png(view.semantics, out_dir + name);
  }

  TriMesh mesh = extract_field_mesh(result.params, ds, cfg.mesh_resolution, 1.0, cfg.threads);
  save_ply(mesh, out_dir + "/mesh_full.ply");
  SeparationResult sep;
  if (!mesh.empty()) {
    sep = separate(mesh);
    save_ply(sep.object, out_dir + "/object.ply");
    save_ply(sep.hand, out_dir + "/hand.ply");
  } else {
    save_ply(TriMesh{}, out_dir + "/object.ply");
    save_ply(TriMesh{}, out_dir + "/hand.ply");
  }

  HoleReport obj_holes = hole_report(sep.object);
  nlohmann::json report{{"steps", cfg.total_steps},
                        {"nan_recoveries", result.nan_recoveries},
                        {"dropped_faces", sep.dropped_faces},
                        {"total_faces", sep.total_faces},
                        {"object_holes",
                         {{"loops", obj_holes.loops},
                          {"boundary_edges", obj_holes.boundary_edges},
                          {"boundary_length", obj_holes.total_boundary_length}}},
                        {"final_h_inv", result.log.empty() ? 0.0 : result.log.back().h_inv}};
  if (ds.has_gt_poses() && !result.log.empty()) {
    report["initial_pose_error_deg"] = result.log.front().pose_err_deg;
    report["final_pose_error_deg"] = result.log.back().pose_err_deg;
  }
  {
    std::ofstream out(out_dir + "/recon_report.json");
    out << report.dump(2) << "\n";
  }
  write_run_manifest(out_dir, "reconstruct", cfg_json, cfg.seed,
                     {{"data", data_dir}, {"poses", poses_path}},
                     {{"mesh", out_dir + "/mesh_full.ply"}}, timer.seconds());
  std::cout << "reconstruct: " << cfg.total_steps << " steps, mesh "
            << mesh.vertices.size() << " vertices (" << sep.object.faces.size()
            << " object faces) -> " << out_dir << "\n";
  return 0;
}

int cmd_reconstruct(const std::string& data_dir, const std::string& poses_path,
                    const std::string& config_path, const std::string& out_dir,
                    const std::string& variant, const std::string& resume_path) {
  nlohmann::json cfg_json;
  TrainConfig cfg;
  TrainDataset ds;
  try {
    cfg_json = load_json(config_path);
    cfg = cfg_json.get<TrainConfig>();
    apply_ablation(&cfg, variant);
    cfg_json["ablation"] = variant.empty() ? "none" : variant;
    ds = load_train_dataset(data_dir, poses_path, cfg.sphere_margin);
  } catch (const std::exception& e) {
    std::cerr << "reconstruct: " << e.what() << "\n";
    return 2;
  }
  try {
    fs::create_directories(out_dir);
    std::string precision = cfg_json.value("precision", "float32");
    if (precision == "float64")
      return run_reconstruction<double>(ds, cfg, cfg_json, data_dir, poses_path, out_dir,
                                        resume_path);
    return run_reconstruction<float>(ds, cfg, cfg_json, data_dir, poses_path, out_dir,
                                     resume_path);
  } catch (const std::exception& e) {
    std::cerr << "reconstruct: " << e.what() << "\n";
    return 3;
  }
}

// -------------------------------------------------------------------------
// evaluate
// -------------------------------------------------------------------------

/// Object-region PSNR averaged over the rendered eval frames.
double renders_psnr(const std::string& renders_dir, const std::string& data_dir) {
  double sum = 0.0;
  int count = 0;
  for (const auto& entry : fs::directory_iterator(renders_dir)) {
    std::string file = entry.path().filename().string();
    if (file.size() != 14 || file.substr(4) != "_color.png") continue;
    int frame = std::stoi(file.substr(0, 4));
    char name[64];
    std::snprintf(name, sizeof(name), "/frames/%04d_color.png", frame);
    std::string ref_path = data_dir + name;
    std::snprintf(name, sizeof(name), "/frames/%04d_sem.png", frame);
    std::string sem_path = data_dir + name;
    if (!fs::exists(ref_path) || !fs::exists(sem_path)) continue;
    Image rendered = read_png(entry.path().string());
    Image reference = read_png(ref_path);
    Image sem = read_png(sem_path);
    Image mask = Image::make(sem.width, sem.height, 1, 0);
    long object_pixels = 0;
    for (int r = 0; r < sem.height; ++r)
      for (int c = 0; c < sem.width; ++c)
        if (sem.at(r, c, 0) == kLabelObject) {
          mask.at(r, c) = 255;
          ++object_pixels;
        }
    if (object_pixels == 0) continue;
    sum += psnr_object_region(rendered, reference, mask);
    ++count;
  }
  return count > 0 ? sum / count : std::numeric_limits<double>::quiet_NaN();
}

int cmd_evaluate(const std::string& pred_path, const std::string& gt_path,
                 const std::string& renders_dir, const std::string& data_dir,
                 const std::string& scene, const std::string& variant,
                 const std::string& out_csv) {
  TriMesh pred, gt;
  try {
    pred = load_ply(pred_path);
    gt = load_ply(gt_path);
  } catch (const std::exception& e) {
    std::cerr << "evaluate: " << e.what() << "\n";
    return 2;
  }

  double chamfer_value = kChamferWorst;
  int icp_iters = 0;
  if (!pred.empty() && !gt.empty()) {
    // Unit-size normalization, then point-to-point ICP registration, then
    // the Chamfer metric (x100 convention).
    TriMesh pred_n = pred, gt_n = gt;
    double sp = pred_n.normalization_scale(), sg = gt_n.normalization_scale();
    for (auto& v : pred_n.vertices) v *= sp;
    for (auto& v : gt_n.vertices) v *= sg;
    try {
      AlignmentResult align = icp_align(pred_n, gt_n);
      chamfer_value = align.final_chamfer;
      icp_iters = align.iterations;
    } catch (const std::exception& e) {
      std::cerr << "evaluate: ICP degenerate (" << e.what() << "); reporting unaligned chamfer\n";
      chamfer_value = chamfer(pred_n, gt_n);
    }
  }

  double psnr = std::numeric_limits<double>::quiet_NaN();
  if (!renders_dir.empty() && !data_dir.empty()) {
    try {
      psnr = renders_psnr(renders_dir, data_dir);
    } catch (const std::exception& e) {
      std::cerr << "evaluate: " << e.what() << "\n";
      return 2;
    }
  }

  bool write_header = !fs::exists(out_csv);
  std::ofstream out(out_csv, std::ios::app);
  if (!out) {
    std::cerr << "evaluate: cannot open " << out_csv << "\n";
    return 2;
  }
  if (write_header) out << "scene,variant,chamfer_x100,psnr_db,icp_iters\n";
  out << scene << "," << variant << "," << format_double(chamfer_value) << ","
      << format_double(psnr) << "," << icp_iters << "\n";
  std::cout << "evaluate: chamfer_x100 " << format_double(chamfer_value) << " psnr "
            << format_double(psnr) << "\n";
  return 0;
}

// -------------------------------------------------------------------------
// ablate
// -------------------------------------------------------------------------

int cmd_ablate(const std::string& data_dir, const std::string& poses_path,
               const std::string& config_path, const std::string& out_dir) {
  const char* ladder[4] = {"vanilla", "camera", "deformation", "guiding"};
  try {
    fs::create_directories(out_dir);
  } catch (const std::exception& e) {
    std::cerr << "ablate: " << e.what() << "\n";
    return 2;
  }
  std::string csv = out_dir + "/ablation.csv";
  if (fs::exists(csv)) fs::remove(csv);
  for (const char* variant : ladder) {
    std::string vdir = out_dir + "/" + variant;
    int rc = cmd_reconstruct(data_dir, poses_path, config_path, vdir, variant, "");
    if (rc != 0) return rc;
    rc = cmd_evaluate(vdir + "/object.ply", data_dir + "/gt/object.ply", vdir + "/renders",
                      data_dir, fs::path(data_dir).filename().string(), variant, csv);
    if (rc != 0) return rc;
  }
  std::cout << "ablate: ladder written to " << csv << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hand-held object reconstruction pipeline"};
  app.require_subcommand(1);

  std::string spec_path, out_dir, data_dir, config_path, init_path, poses_path;
  std::string pred_path, gt_path, renders_dir, scene_name = "scene", variant_name = "full";
  std::string ablate_variant, resume_path, out_csv = "metrics.csv";
  bool no_share = false;

  auto* generate = app.add_subcommand("generate", "render a synthetic dataset");
  generate->add_option("--spec", spec_path, "scene spec JSON")->required();
  generate->add_option("--out", out_dir, "output dataset directory")->required();

  auto* track = app.add_subcommand("track", "fit the hand to 2D keypoints");
  track->add_option("--data", data_dir, "dataset directory")->required();
  track->add_option("--out", out_dir, "output directory")->required();
  track->add_option("--config", config_path, "tracking config JSON");
  track->add_option("--init", init_path, "initial poses JSON");
  track->add_flag("--no-share", no_share, "independent per-frame fitting");

  auto* reconstruct = app.add_subcommand("reconstruct", "train the implicit field");
  reconstruct->add_option("--data", data_dir, "dataset directory")->required();
  reconstruct->add_option("--poses", poses_path, "tracked poses JSON")->required();
  reconstruct->add_option("--config", config_path, "training config JSON")->required();
  reconstruct->add_option("--out", out_dir, "output directory")->required();
  reconstruct->add_option("--ablate", ablate_variant,
                          "vanilla|camera|deformation|guiding");
  reconstruct->add_option("--resume", resume_path, "checkpoint to resume from");

  auto* evaluate = app.add_subcommand("evaluate", "mesh + render metrics");
  evaluate->add_option("--pred", pred_path, "predicted mesh PLY")->required();
  evaluate->add_option("--gt", gt_path, "ground-truth mesh PLY")->required();
  evaluate->add_option("--renders", renders_dir, "rendered eval images");
  evaluate->add_option("--data", data_dir, "dataset directory (for PSNR)");
  evaluate->add_option("--scene", scene_name, "scene label for the CSV");
  evaluate->add_option("--variant", variant_name, "variant label for the CSV");
  evaluate->add_option("--out", out_csv, "metrics CSV (appended)");

  auto* ablate = app.add_subcommand("ablate", "run the full ablation ladder");
  ablate->add_option("--data", data_dir, "dataset directory")->required();
  ablate->add_option("--poses", poses_path, "tracked poses JSON")->required();
  ablate->add_option("--config", config_path, "training config JSON")->required();
  ablate->add_option("--out", out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (generate->parsed()) return cmd_generate(spec_path, out_dir);
    if (track->parsed()) return cmd_track(data_dir, out_dir, config_path, init_path, no_share);
    if (reconstruct->parsed())
      return cmd_reconstruct(data_dir, poses_path, config_path, out_dir, ablate_variant,
                             resume_path);
    if (evaluate->parsed())
      return cmd_evaluate(pred_path, gt_path, renders_dir, data_dir, scene_name, variant_name,
                          out_csv);
    if (ablate->parsed()) return cmd_ablate(data_dir, poses_path, config_path, out_dir);
  } catch (const std::exception& e) {
    std::cerr << "inhand: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
