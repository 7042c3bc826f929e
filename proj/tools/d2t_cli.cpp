// Command-line front end: synth, ingest-check, run, eval, render.

#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "d2t/d2t.hpp"

namespace {

using namespace d2t;

void add_config_flags(CLI::App* cmd, PipelineConfig& c, std::string& config_file) {
  cmd->add_option("--config", config_file, "JSON config; flags given on the command line override it");
  cmd->add_option("--scene", c.scene_dir, "Scene directory");
  cmd->add_option("--out", c.run_dir, "Run directory");
  cmd->add_option("--views", c.n_views, "Training views (0: from the scene)");
  cmd->add_option("--kp", c.k_p, "Novel poses per training segment (0: by view count)");
  cmd->add_option("--p", c.p, "Retained confidence fraction for depth alignment");
  cmd->add_option("--w", c.window, "Mask-clean window (odd)");
  cmd->add_option("--lambda", c.weights.lambda, "D-SSIM weight");
  cmd->add_option("--lambda-depth", c.weights.lambda_depth, "Depth loss weight");
  cmd->add_option("--lambda-pseudo", c.weights.lambda_pseudo, "Synthesized-view loss weight");
  cmd->add_option("--coarse-steps", c.schedule.coarse_steps, "Coarse stage steps");
  cmd->add_option("--fine-steps", c.schedule.fine_steps, "Fine stage steps");
  cmd->add_option("--pose-lr", c.schedule.lr.pose, "Pose learning rate at the start of each stage");
  cmd->add_option("--pose-lr-final", c.schedule.lr.pose_final, "Pose learning rate at the end of each stage");
  cmd->add_option("--seed", c.seed, "Random seed");
  cmd->add_option("--inpainter", c.inpainter, "builtin | external");
  cmd->add_option("--inpainter-command", c.inpainter_command, "Called as <cmd> <image.png> <mask.png> <out.png>");
  cmd->add_option("--max-points", c.max_points, "Cap on initial Gaussians (0: no cap)");
  cmd->add_option("--noise-rot-deg", c.init_noise_rotation_deg, "Rotation noise injected into the initial poses");
  cmd->add_option("--noise-trans", c.init_noise_translation, "Translation noise, fraction of the scene diameter");
  cmd->add_option("--localize-steps", c.localize_steps, "Test-view localization steps");
  cmd->add_option("--normalize-depth", c.normalize_depth, "Divide rendered depth by accumulated alpha (true/false)");
  cmd->add_flag("--quiet", c.quiet, "No progress output");
}

// Config file first, then explicit flags on top.
PipelineConfig resolve_config(CLI::App* cmd, const PipelineConfig& flags, const std::string& config_file) {
  if (config_file.empty()) {
    flags.validate();
    return flags;
  }
  PipelineConfig c = config_from_json(read_json(config_file));
  auto given = [&](const char* name) { return cmd->count(name) > 0; };
  if (given("--scene")) c.scene_dir = flags.scene_dir;
  if (given("--out")) c.run_dir = flags.run_dir;
  if (given("--views")) c.n_views = flags.n_views;
  if (given("--kp")) c.k_p = flags.k_p;
  if (given("--p")) c.p = flags.p;
  if (given("--w")) c.window = flags.window;
  if (given("--lambda")) c.weights.lambda = flags.weights.lambda;
  if (given("--lambda-depth")) c.weights.lambda_depth = flags.weights.lambda_depth;
  if (given("--lambda-pseudo")) c.weights.lambda_pseudo = flags.weights.lambda_pseudo;
  if (given("--coarse-steps")) c.schedule.coarse_steps = flags.schedule.coarse_steps;
  if (given("--fine-steps")) c.schedule.fine_steps = flags.schedule.fine_steps;
  if (given("--pose-lr")) c.schedule.lr.pose = flags.schedule.lr.pose;
  if (given("--pose-lr-final")) c.schedule.lr.pose_final = flags.schedule.lr.pose_final;
  if (given("--seed")) c.seed = flags.seed;
  if (given("--inpainter")) c.inpainter = flags.inpainter;
  if (given("--inpainter-command")) c.inpainter_command = flags.inpainter_command;
  if (given("--max-points")) c.max_points = flags.max_points;
  if (given("--noise-rot-deg")) c.init_noise_rotation_deg = flags.init_noise_rotation_deg;
  if (given("--noise-trans")) c.init_noise_translation = flags.init_noise_translation;
  if (given("--localize-steps")) c.localize_steps = flags.localize_steps;
  if (given("--normalize-depth")) c.normalize_depth = flags.normalize_depth;
  c.quiet = flags.quiet;
  c.validate();
  return c;
}

int report(const std::exception& e) {
  std::cerr << "error: " << e.what() << "\n";
  if (const auto* v = dynamic_cast<const ValidationError*>(&e)) {
    for (const auto& o : v->offenders()) std::cerr << "  " << o << "\n";
  }
  if (const auto* s = dynamic_cast<const StageError*>(&e)) {
    for (const auto& o : s->details()) std::cerr << "  " << o << "\n";
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse-view reconstruction pipeline"};
  app.require_subcommand(1);

  SyntheticSpec spec;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Write a synthetic box-room scene directory");
  synth->add_option("--out", synth_out, "Scene directory")->required();
  synth->add_option("--views", spec.n_views, "Training views");
  synth->add_option("--tests", spec.n_test, "Held-out views");
  synth->add_option("--width", spec.image_width, "Image width");
  synth->add_option("--height", spec.image_height, "Image height");
  synth->add_option("--pointmap-width", spec.pointmap_width, "Pointmap width");
  synth->add_option("--pointmap-height", spec.pointmap_height, "Pointmap height");
  synth->add_option("--focal", spec.focal, "Focal length at image resolution");
  synth->add_option("--arc-deg", spec.arc_degrees, "Angular span of the training cameras");
  synth->add_option("--mono-a", spec.mono_scale, "Mono inverse-depth scale");
  synth->add_option("--mono-b", spec.mono_shift, "Mono inverse-depth shift");
  synth->add_option("--pointmap-noise", spec.pointmap_noise, "Relative pointmap noise");
  synth->add_option("--seed", spec.seed, "Random seed");

  std::string ingest_dir;
  int ingest_views = 0;
  auto* check = app.add_subcommand("ingest-check", "Validate a scene directory");
  check->add_option("scene", ingest_dir, "Scene directory")->required();
  check->add_option("--views", ingest_views, "Training views (0: from config.json)");

  PipelineConfig run_flags;
  std::string run_config, skip_to, stop_after;
  bool resume = false;
  auto* run = app.add_subcommand("run", "Run the pipeline");
  add_config_flags(run, run_flags, run_config);
  run->add_option("--skip-to", skip_to, "First stage to execute: ccm|coarse|cada|wigi|fine|eval");
  run->add_option("--stop-after", stop_after, "Last stage to execute");
  run->add_flag("--resume", resume, "Start at the first stage without a completion marker");

  PipelineConfig eval_flags;
  std::string eval_config;
  auto* eval = app.add_subcommand("eval", "Recompute metrics for a finished run");
  add_config_flags(eval, eval_flags, eval_config);

  std::string render_run, render_out;
  int render_frames = 10;
  auto* rend = app.add_subcommand("render", "Render a smooth trajectory through the refined poses as PNGs");
  rend->add_option("--run", render_run, "Run directory")->required();
  rend->add_option("--out", render_out, "Output directory")->required();
  rend->add_option("--frames", render_frames, "Frames per segment between training views");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      write_scene(synth_out, make_box_room(spec));
      std::cout << "wrote " << synth_out << "\n";
      return 0;
    }
    if (check->parsed()) {
      IngestOptions opt;
      opt.n_views = ingest_views;
      const SceneBundle b = ingest(ingest_dir, opt);
      std::cout << "views: " << b.n_views() << "\n"
                << "held-out views: " << b.test_images.size() << "\n"
                << "pairs: " << b.graph.edges.size() << "\n"
                << "image: " << b.images.front().width() << "x" << b.images.front().height() << "\n"
                << "pointmap: " << b.graph.edges.front().width() << "x" << b.graph.edges.front().height() << "\n"
                << "ground truth: " << (b.gt ? "yes" : "no") << "\n";
      for (const auto& w : b.warnings) std::cout << "warning: " << w << "\n";
      return 0;
    }
    if (run->parsed()) {
      Pipeline p(resolve_config(run, run_flags, run_config));
      std::string first = skip_to.empty() ? "ccm" : skip_to;
      if (resume) {
        first = p.first_incomplete();
        if (first.empty()) {
          std::cout << "all stages complete\n";
          return 0;
        }
      }
      p.run(first, stop_after.empty() ? "eval" : stop_after);
      std::cout << "metrics: " << (p.config().run_dir / "metrics.json").string() << "\n";
      return 0;
    }
    if (eval->parsed()) {
      Pipeline p(resolve_config(eval, eval_flags, eval_config));
      p.run("eval", "eval");
      std::cout << io::read_file(p.config().run_dir / "metrics.json");
      return 0;
    }
    if (rend->parsed()) {
      const fs::path rd = render_run;
      const json cfg = read_json(rd / "ccm" / "intrinsics.json");
      const CameraIntrinsics intr(cfg.at("focal_image").get<double>(), cfg.at("image_width").get<int>(),
                                  cfg.at("image_height").get<int>());
      const GaussianCloud cloud = read_model(rd / "model.bin");
      const auto poses = poses_from_json(read_json(rd / "poses_refined.json"));
      const NovelPoseSet path = sample_novel_poses(poses, render_frames);
      for (std::size_t k = 0; k < path.poses.size(); ++k) {
        char name[32];
        std::snprintf(name, sizeof name, "frame_%04zu.png", k);
        io::write_png(fs::path(render_out) / name, render(cloud, path.poses[k], intr).color);
      }
      std::cout << "wrote " << path.poses.size() << " frames to " << render_out << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    return report(e);
  }
  return 0;
}
