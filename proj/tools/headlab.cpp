// headlab: train a toy DiT, sample with head-level perturbation guidance,
// search for heads with HeadHunter, sweep (w, u), inspect selections.
//
// Exit codes: 0 ok, 2 usage or config error, 3 numeric failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "headlab/headlab.hpp"

namespace fs = std::filesystem;
using namespace headlab;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void ensure_parent(const fs::path& file) {
  if (file.has_parent_path()) ensure_dir(file.parent_path());
}

std::string text_of(const Bytes& b) { return std::string(b.begin(), b.end()); }

ObjectiveId objective_arg(const std::string& text) {
  const auto obj = parse_objective(text);
  if (!obj) throw DomainError("unknown objective '" + text + "'");
  return *obj;
}

PerturbMethod method_arg(const std::string& text) {
  const auto m = parse_perturb_method(text);
  if (!m) throw DomainError("unknown method '" + text + "'");
  return *m;
}

PertAnchor anchor_arg(const std::string& text) {
  const auto a = parse_pert_anchor(text);
  if (!a) throw DomainError("unknown anchor '" + text + "', expected cond or cfg");
  return *a;
}

std::vector<PromptSeedPair> pairs_arg(const std::string& path, const DitConfig& cfg) {
  if (path.empty()) return default_pairs(cfg.class_count);
  return parse_pairs_csv(text_of(read_file(path)));
}

/// Flags shared by the sampling subcommands.
struct GuidanceFlags {
  double w_cfg = 3.0;
  double w_pert = 3.0;
  std::size_t steps = 20;
  std::string anchor = "cond";

  void add(CLI::App* cmd, bool with_w_pert) {
    cmd->add_option("--w-cfg", w_cfg, "Classifier-free guidance scale")->capture_default_str();
    if (with_w_pert) cmd->add_option("--w-pert", w_pert, "Perturbation guidance scale")->capture_default_str();
    cmd->add_option("--steps", steps, "Euler steps")->capture_default_str();
    cmd->add_option("--anchor", anchor, "Perturbation anchor: cond or cfg")->capture_default_str();
  }

  GuidanceConfig config() const {
    GuidanceConfig g;
    g.w_cfg = w_cfg;
    g.w_pert = w_pert;
    g.steps = steps;
    g.anchor = anchor_arg(anchor);
    return g;
  }
};

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string out;
  std::string loss_csv;
  std::optional<std::size_t> steps;
};

int run_train(const TrainArgs& a) {
  RunConfig rc = load_run_config(a.config);
  if (a.steps) rc.train.steps = *a.steps;
  const fs::path out = a.out;
  fs::path loss_path = a.loss_csv;
  if (loss_path.empty()) loss_path = fs::path(out).replace_extension(".loss.csv");

  const Dataset data = make_dataset(rc.dataset_size, rc.data_seed, rc.synth);
  const DitWeights init = init_weights(rc.model, rc.init_seed);
  std::fprintf(stderr, "training %zu parameters for %zu steps on %zu images\n", init.parameter_count(),
               rc.train.steps, data.size());
  const TrainResult r = train(init, data, rc.train, [&](const LossPoint& p) {
    std::fprintf(stderr, "step %6zu  loss %.6f\n", p.step, p.loss);
  });
  ensure_parent(out);
  ensure_parent(loss_path);
  save_checkpoint(r.weights, out);
  write_file(loss_path, loss_csv(r.curve));
  if (rc.train.steps > 0)
    std::printf("initial loss %.6f  final loss %.6f  ratio %.4f\n", r.initial_loss, r.final_loss, r.loss_ratio());
  std::printf("checkpoint %s\nloss curve %s\n", out.string().c_str(), loss_path.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct SampleArgs {
  std::string ckpt;
  std::string cond = "0";
  std::string method = "pag";
  double u = 1.0;
  double tau = 1.0;
  std::string heads;
  std::string selection;
  std::uint64_t seed = 0;
  std::string out;
  GuidanceFlags guidance;
  bool method_set = false, u_set = false, tau_set = false;
};

int run_sample(const SampleArgs& a) {
  const DitWeights w = load_checkpoint(a.ckpt);
  GuidanceConfig g = a.guidance.config();
  g.cond = parse_class_label(a.cond);
  g.seed = a.seed;

  PerturbSpec spec = PerturbSpec::of(parse_head_list(a.heads, w.config), method_arg(a.method), a.u, a.tau);
  if (!a.selection.empty()) {
    const SelectionDoc doc = load_selection(a.selection);
    layer_histogram(doc.heads, w.config);  // range check against this model
    spec.heads = doc.heads;
    if (!a.method_set) spec.method = doc.method;
    if (!a.u_set) spec.u = doc.u;
    if (!a.tau_set) spec.tau = doc.tau;
  }

  SampleOptions opts;
  opts.record_trajectory = true;
  opts.track_unguided = true;
  const SampleResult r = sample(w, g, spec, opts);

  const fs::path dir = a.out;
  ensure_dir(dir);
  write_pgm(r.image, dir / "sample.pgm");
  write_file(dir / "trajectory.csv", trajectory_csv(r.trajectory));
  std::printf("heads %zu  method %s  forward passes %zu\n", spec.heads.size(),
              std::string(to_string(spec.method)).c_str(), r.forward_passes);
  std::printf("brightness %.6f  sharpness %.6f\n", brightness(r.image), sharpness(r.image));
  std::printf("wrote %s and %s\n", (dir / "sample.pgm").string().c_str(), (dir / "trajectory.csv").string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct HeadhuntArgs {
  std::string ckpt;
  std::string objective;
  std::size_t k = 3;
  std::size_t rounds = 5;
  std::string pairs;
  std::size_t jobs = 1;
  std::string method = "pag";
  double u = 1.0;
  double tau = 1.0;
  std::string out;
  GuidanceFlags guidance;
};

int run_headhunt(const HeadhuntArgs& a) {
  SearchConfig cfg;
  cfg.objective = objective_arg(a.objective);
  cfg.method = method_arg(a.method);
  cfg.k = a.k;
  cfg.rounds = a.rounds;
  cfg.u = a.u;
  cfg.tau = a.tau;
  cfg.jobs = a.jobs;
  cfg.guidance = a.guidance.config();
  const DitWeights w = load_checkpoint(a.ckpt);
  cfg.pairs = pairs_arg(a.pairs, w.config);
  cfg.validate();

  const SearchState state = headhunter(w, cfg);
  const std::vector<RoundEvaluation> curve = evaluate_rounds(w, state, cfg);

  const fs::path dir = a.out;
  ensure_dir(dir);
  write_file(dir / "ledger.csv", ledger_csv(state.ledger));
  save_selection(state, cfg, dir / "selection.json");
  write_file(dir / "rounds.csv", round_curve_csv(curve));
  write_file(dir / "pairs.csv", pairs_csv(cfg.pairs));
  for (const RoundEvaluation& ev : curve) {
    char name[32];
    std::snprintf(name, sizeof name, "round_%02zu.pgm", ev.round);
    write_pgm(tile_images(ev.images, ev.images.size()), dir / name);
  }

  for (const RoundLedger& r : state.ledger) {
    std::printf("round %zu:", r.round);
    for (HeadId h : r.winners) std::printf(" %s", to_string(h).c_str());
    if (!r.ranking.empty()) std::printf("  (best %.6f)", r.ranking.front().score);
    if (!r.failed.empty()) std::printf("  [%zu failed]", r.failed.size());
    std::printf("\n");
  }
  for (const RoundEvaluation& ev : curve)
    std::printf("selection after round %zu: mean %s %.6f\n", ev.round, to_string(cfg.objective).c_str(),
                ev.mean_score);
  std::printf("wrote %s\n", dir.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct SweepArgs {
  std::string ckpt;
  std::string heads;
  std::string w_grid = "0,1,2,4,6";
  std::string u_grid = "0,0.25,0.5,0.75,1";
  std::string objective;
  std::string method = "soft_pag";
  double tau = 1.0;
  std::string pairs;
  std::size_t jobs = 1;
  std::string out;
  GuidanceFlags guidance;
};

int run_sweep_cmd(const SweepArgs& a) {
  SweepConfig cfg;
  cfg.w_grid = parse_grid(a.w_grid);
  cfg.u_grid = parse_grid(a.u_grid);
  cfg.objective = objective_arg(a.objective);
  cfg.method = method_arg(a.method);
  cfg.tau = a.tau;
  cfg.jobs = a.jobs;
  cfg.guidance = a.guidance.config();
  const DitWeights w = load_checkpoint(a.ckpt);
  cfg.heads = parse_head_list(a.heads, w.config);
  cfg.pairs = pairs_arg(a.pairs, w.config);

  const SweepResult r = run_sweep(w, cfg);
  const fs::path out = a.out;
  fs::path matrix = out;
  matrix.replace_filename(out.stem().string() + "_matrix" + out.extension().string());
  ensure_parent(out);
  write_file(out, sweep_csv(r));
  write_file(matrix, sweep_matrix_csv(r));

  const SweepResult::Best best = r.best();
  std::printf("best cell w=%s u=%s mean %s %.6f\n", format_double(r.w_grid[best.wi]).c_str(),
              format_double(r.u_grid[best.ui]).c_str(), to_string(cfg.objective).c_str(), best.score);
  std::printf("wrote %s and %s\n", out.string().c_str(), matrix.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct InspectArgs {
  std::string ckpt;
  std::string selection;
  std::string compare;
};

int run_inspect(const InspectArgs& a) {
  const DitWeights w = load_checkpoint(a.ckpt);
  const SelectionDoc doc = load_selection(a.selection);
  const std::vector<std::size_t> hist = layer_histogram(doc.heads, w.config);

  std::printf("selection: %zu heads  method %s  u %s  tau %s  objective %s  k %zu  rounds %zu\n", doc.heads.size(),
              std::string(to_string(doc.method)).c_str(), format_double(doc.u).c_str(),
              format_double(doc.tau).c_str(), doc.objective.c_str(), doc.k, doc.rounds);
  std::printf("heads:");
  for (HeadId h : doc.heads) std::printf(" %s", to_string(h).c_str());
  std::printf("\nlayer histogram:\n");
  for (std::size_t l = 0; l < hist.size(); ++l)
    std::printf("  layer %zu  %2zu  %s\n", l, hist[l], std::string(hist[l], '#').c_str());
  std::printf("ledger:\n");
  for (const SelectionDoc::Round& r : doc.ledger) {
    std::printf("  round %zu  candidates %zu  best %s  winners", r.round, r.candidates, r.best_score.c_str());
    for (HeadId h : r.winners) std::printf(" %s", to_string(h).c_str());
    if (r.failed) std::printf("  failed %zu", r.failed);
    std::printf("\n");
  }
  if (!a.compare.empty()) {
    const SelectionDoc other = load_selection(a.compare);
    layer_histogram(other.heads, w.config);
    std::printf("overlap with %s: %.1f%%\n", a.compare.c_str(), overlap_percent(doc.heads, other.heads));
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct DumpArgs {
  std::size_t count = 16;
  std::uint64_t seed = 1000;
  std::string out;
};

int run_dump(const DumpArgs& a) {
  dump_dataset(a.out, a.count, a.seed);
  std::printf("wrote %zu images to %s\n", a.count, a.out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"headlab: head-level attention perturbation guidance on a toy diffusion transformer"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train the toy DiT by flow matching");
  train_cmd->add_option("--config", train_args.config, "JSON run config")->required();
  train_cmd->add_option("--out", train_args.out, "Checkpoint path")->required();
  train_cmd->add_option("--steps", train_args.steps, "Override train.steps");
  train_cmd->add_option("--loss-csv", train_args.loss_csv, "Loss curve path (default: <out>.loss.csv)");

  SampleArgs sample_args;
  auto* sample_cmd = app.add_subcommand("sample", "Draw one guided sample");
  sample_cmd->add_option("--ckpt", sample_args.ckpt, "Checkpoint")->required();
  sample_cmd->add_option("--cond", sample_args.cond, "Class id or null")->capture_default_str();
  auto* method_opt = sample_cmd->add_option("--method", sample_args.method, "Perturbation method")->capture_default_str();
  auto* u_opt = sample_cmd->add_option("--u", sample_args.u, "Interpolation strength")->capture_default_str();
  auto* tau_opt = sample_cmd->add_option("--tau", sample_args.tau, "Temperature")->capture_default_str();
  sample_cmd->add_option("--heads", sample_args.heads, "Heads: \"l:h,l:h\", \"all\" or \"L3:*\"");
  sample_cmd->add_option("--selection", sample_args.selection, "Take heads (and method, u, tau) from a selection file");
  sample_cmd->add_option("--seed", sample_args.seed, "Noise seed")->capture_default_str();
  sample_cmd->add_option("--out", sample_args.out, "Output directory")->required();
  sample_args.guidance.add(sample_cmd, true);

  HeadhuntArgs hunt_args;
  auto* hunt_cmd = app.add_subcommand("headhunt", "Greedy head selection against an objective");
  hunt_cmd->add_option("--ckpt", hunt_args.ckpt, "Checkpoint")->required();
  hunt_cmd->add_option("--objective", hunt_args.objective, "Objective name")->required();
  hunt_cmd->add_option("--k", hunt_args.k, "Heads added per round")->capture_default_str();
  hunt_cmd->add_option("--rounds", hunt_args.rounds, "Rounds")->capture_default_str();
  hunt_cmd->add_option("--pairs", hunt_args.pairs, "CSV of cond,seed pairs (default: one per class)");
  hunt_cmd->add_option("--jobs", hunt_args.jobs, "Worker threads")->capture_default_str();
  hunt_cmd->add_option("--method", hunt_args.method, "Perturbation method")->capture_default_str();
  hunt_cmd->add_option("--u", hunt_args.u, "Interpolation strength")->capture_default_str();
  hunt_cmd->add_option("--tau", hunt_args.tau, "Temperature")->capture_default_str();
  hunt_cmd->add_option("--out", hunt_args.out, "Output directory")->required();
  hunt_args.guidance.add(hunt_cmd, true);

  SweepArgs sweep_args;
  auto* sweep_cmd = app.add_subcommand("sweep", "Grid search over (w_pert, u)");
  sweep_cmd->add_option("--ckpt", sweep_args.ckpt, "Checkpoint")->required();
  sweep_cmd->add_option("--heads", sweep_args.heads, "Heads: \"l:h,l:h\", \"all\" or \"L3:*\"")->required();
  sweep_cmd->add_option("--w-grid", sweep_args.w_grid, "w_pert values")->capture_default_str();
  sweep_cmd->add_option("--u-grid", sweep_args.u_grid, "u values")->capture_default_str();
  sweep_cmd->add_option("--objective", sweep_args.objective, "Objective name")->required();
  sweep_cmd->add_option("--method", sweep_args.method, "Perturbation method")->capture_default_str();
  sweep_cmd->add_option("--tau", sweep_args.tau, "Temperature")->capture_default_str();
  sweep_cmd->add_option("--pairs", sweep_args.pairs, "CSV of cond,seed pairs (default: one per class)");
  sweep_cmd->add_option("--jobs", sweep_args.jobs, "Worker threads")->capture_default_str();
  sweep_cmd->add_option("--out", sweep_args.out, "Cell CSV path; the matrix goes to <stem>_matrix.csv")->required();
  sweep_args.guidance.add(sweep_cmd, false);

  InspectArgs inspect_args;
  auto* inspect_cmd = app.add_subcommand("inspect", "Summarize a selection file");
  inspect_cmd->add_option("--ckpt", inspect_args.ckpt, "Checkpoint")->required();
  inspect_cmd->add_option("--selection", inspect_args.selection, "Selection JSON")->required();
  inspect_cmd->add_option("--compare", inspect_args.compare, "Second selection JSON for an overlap report");

  DumpArgs dump_args;
  auto* dump_cmd = app.add_subcommand("dump-data", "Write synthetic training images as PGM");
  dump_cmd->add_option("--count", dump_args.count, "Images")->capture_default_str();
  dump_cmd->add_option("--seed", dump_args.seed, "Base seed")->capture_default_str();
  dump_cmd->add_option("--out", dump_args.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }
  sample_args.method_set = method_opt->count() > 0;
  sample_args.u_set = u_opt->count() > 0;
  sample_args.tau_set = tau_opt->count() > 0;

  try {
    if (*train_cmd) return run_train(train_args);
    if (*sample_cmd) return run_sample(sample_args);
    if (*hunt_cmd) return run_headhunt(hunt_args);
    if (*sweep_cmd) return run_sweep_cmd(sweep_args);
    if (*inspect_cmd) return run_inspect(inspect_args);
    if (*dump_cmd) return run_dump(dump_args);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
