#pragma once

// The `ivgf` command line: forward, gradcheck, augment, train-toy, eval and
// gen-data. run_cli() is the whole program so tests can drive it in-process.
//
// Exit codes: 0 ok, 1 gradient-check violation, 2 config or argument error,
// 3 I/O or format error, 4 shape error, 5 non-finite values.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ivgf/gradcheck.hpp"
#include "ivgf/io.hpp"
#include "ivgf/pipeline.hpp"

namespace ivgf {

inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kGradFail = 1, kConfigErr = 2, kIoErr = 3, kShapeErr = 4, kNonFinite = 5 };

namespace fs = std::filesystem;

namespace cli {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
};

/// Config file (or defaults) with the seed resolved as flag > IVGF_SEED > config.
struct Resolved {
  RunConfig cfg;
  std::string seed_source = "config";
};

inline Resolved resolve(const Common& c) {
  Resolved r;
  if (!c.config.empty()) {
    if (!fs::exists(c.config)) throw IoError("config file not found: " + c.config);
    const Bytes b = read_file(c.config);
    r.cfg = parse_config(std::string(b.begin(), b.end()));
  }
  if (c.seed) {
    r.cfg.seed = *c.seed;
    r.seed_source = "flag";
  } else if (const char* env = std::getenv("IVGF_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      const std::string s(env);
      const unsigned long long v = std::stoull(s, &used);
      if (used != s.size() || s.front() == '-') throw std::invalid_argument(s);
      r.cfg.seed = v;
    } catch (const std::logic_error&) {
      throw ConfigError(std::string("IVGF_SEED is not an unsigned integer: ") + env);
    }
    r.seed_source = "env";
  }
  return r;
}

inline Tensor load_image(const std::string& path) {
  if (!fs::exists(path)) throw IoError("image not found: " + path);
  try {
    return read_pnm(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what(), e.byte_offset);
  }
}

inline void ensure_dir(const fs::path& d) {
  std::error_code ec;
  fs::create_directories(d, ec);
  if (ec || !fs::is_directory(d)) throw IoError("cannot create directory " + d.string());
}

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Run metadata, written before any result file. `outputs` lists the files
/// the command is about to produce.
inline void write_metadata(const fs::path& dir, const std::string& command, const Resolved& r,
                           const std::vector<std::string>& outputs, const std::vector<std::string>& extra = {}) {
  std::string s = "command = " + command + "\nversion = " + kVersion + "\nseed = " + std::to_string(r.cfg.seed) +
                  "\nseed_source = " + r.seed_source + "\nstarted = " + utc_now() + "\n";
  for (const auto& e : extra) s += e + "\n";
  s += "\n[config]\n" + config_to_text(r.cfg) + "\n[outputs]\n";
  for (const auto& o : outputs) s += o + "\n";
  write_file(dir / "metadata.txt", s);
}

/// Checkpoint must hold exactly the parameters the config builds.
inline ParamStore load_matching_checkpoint(const std::string& path, const ModelConfig& m) {
  if (!fs::exists(path)) throw IoError("checkpoint not found: " + path);
  ParamStore ps = load_checkpoint(path);
  const ParamStore ref = init_model_params(m, 0);
  for (const auto& [name, t] : ref) {
    if (!ps.contains(name)) throw FormatError("checkpoint " + path + " lacks parameter " + name, 0);
    if (ps.get(name).shape() != t.shape())
      throw DimensionError("checkpoint parameter " + name + " has shape " + shape_str(ps.get(name).shape()) +
                           ", config expects " + shape_str(t.shape()));
  }
  if (ps.size() != ref.size())
    throw FormatError("checkpoint " + path + " has " + std::to_string(ps.size()) + " parameters, config builds " +
                          std::to_string(ref.size()),
                      0);
  return ps;
}

// Scene directories hold <stem>_ir.ppm, <stem>_vis.ppm and <stem>_mask.pgm.
inline void write_scene(const fs::path& dir, const std::string& stem, const SyntheticScene& s) {
  write_pnm(s.ir, dir / (stem + "_ir.ppm"));
  write_pnm(s.vis, dir / (stem + "_vis.ppm"));
  write_file(dir / (stem + "_mask.pgm"), encode_label_pgm(s.mask));
}

inline std::vector<SyntheticScene> load_scene_dir(const std::string& dir, std::size_t classes) {
  if (!fs::is_directory(dir)) throw IoError("data directory not found: " + dir);
  std::vector<std::string> stems;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string n = e.path().filename().string();
    const std::string suffix = "_ir.ppm";
    if (n.size() > suffix.size() && n.ends_with(suffix)) stems.push_back(n.substr(0, n.size() - suffix.size()));
  }
  if (stems.empty()) throw IoError("no scenes (*_ir.ppm) in data directory " + dir);
  std::sort(stems.begin(), stems.end());
  std::vector<SyntheticScene> out;
  for (const auto& st : stems) {
    const fs::path base = fs::path(dir) / st;
    SyntheticScene s{load_image(base.string() + "_ir.ppm"), load_image(base.string() + "_vis.ppm"), Tensor()};
    const std::string mpath = base.string() + "_mask.pgm";
    if (!fs::exists(mpath)) throw IoError("mask not found: " + mpath);
    s.mask = read_label_pgm(read_file(mpath));
    if (s.ir.shape() != s.vis.shape() || s.mask.dim(0) != s.ir.dim(1) || s.mask.dim(1) != s.ir.dim(2))
      throw DimensionError("scene " + st + ": image and mask shapes disagree");
    for (double v : s.mask.data())
      if (v != kernels::kIgnoreLabel && v >= static_cast<double>(classes))
        throw FormatError(mpath + ": class id " + std::to_string(static_cast<int>(v)) + " out of range", 0);
    out.push_back(std::move(s));
  }
  return out;
}

inline void check_image_pair(const Tensor& ir, const Tensor& vis) {
  if (ir.shape() != vis.shape())
    throw DimensionError("ir and vis images differ in shape: " + shape_str(ir.shape()) + " vs " +
                         shape_str(vis.shape()));
  if (ir.dim(1) % 32 != 0 || ir.dim(2) % 32 != 0)
    throw DimensionError("image size " + std::to_string(ir.dim(2)) + "x" + std::to_string(ir.dim(1)) +
                         " is not divisible by 32");
}

// ---------------------------------------------------------------------------
// Commands

struct ForwardArgs {
  Common common;
  std::string ir, vis, ckpt, out_dir;
  bool dump_features = false;
};

inline int cmd_forward(const ForwardArgs& a, std::ostream& out) {
  Resolved r = resolve(a.common);
  const Tensor ir = load_image(a.ir), vis = load_image(a.vis);
  check_image_pair(ir, vis);
  const ParamStore ps =
      a.ckpt.empty() ? init_model_params(r.cfg.model, r.cfg.seed) : load_matching_checkpoint(a.ckpt, r.cfg.model);
  ensure_dir(a.out_dir);
  std::vector<std::string> outputs{"mask.pgm"};
  if (a.dump_features)
    for (int i = 1; i <= 4; ++i)
      for (const char* k : {"x", "y", "xy"}) outputs.push_back("feat" + std::to_string(i) + "_" + k + ".pgm");
  write_metadata(a.out_dir, "forward", r, outputs,
                 {"ir = " + a.ir, "vis = " + a.vis, "ckpt = " + (a.ckpt.empty() ? "(seed init)" : a.ckpt)});

  Graph g;
  auto f = encoder_forward(g.constant(standardize(ir)), g.constant(standardize(vis)), ps, r.cfg.model);
  const Tensor logits = seg_forward(f, ps).value();
  if (!logits.all_finite()) throw NonFiniteError("non-finite logits; first non-finite tensor: " +
                                                 g.first_non_finite().value_or("logits"));
  write_file(fs::path(a.out_dir) / "mask.pgm", encode_label_pgm(argmax_classes(logits)));
  if (a.dump_features)
    for (std::size_t i = 0; i < 4; ++i) {
      const std::string s = std::to_string(i + 1);
      write_pnm(max_projection(f.x[i].value()), fs::path(a.out_dir) / ("feat" + s + "_x.pgm"));
      write_pnm(max_projection(f.y[i].value()), fs::path(a.out_dir) / ("feat" + s + "_y.pgm"));
      write_pnm(max_projection(f.fused[i].value()), fs::path(a.out_dir) / ("feat" + s + "_xy.pgm"));
    }
  out << "wrote " << (fs::path(a.out_dir) / "mask.pgm").string() << " (" << logits.dim(2) << "x" << logits.dim(1)
      << ")\n";
  return kOk;
}

struct GradcheckArgs {
  std::uint64_t seed = 1;
  long long trials = 20;
  std::string fault;
};

inline int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  if (a.trials <= 0) throw ConfigError("--trials must be positive");
  GradCheckOptions o;
  o.seed = a.seed;
  o.trials = static_cast<std::size_t>(a.trials);
  o.fault_op = a.fault;
  out << "version = " << kVersion << "\nseed = " << o.seed << "\ntrials = " << o.trials << "\n";
  if (!o.fault_op.empty()) out << "fault = " << o.fault_op << "\n";
  int rc = kOk;
  char line[256];
  std::snprintf(line, sizeof line, "%-11s %12s %10s %8s  %s\n", "block", "max_rel_err", "tolerance", "checks", "worst");
  out << line;
  for (const auto& b : gradcheck_blocks()) {
    GradCheckResult res = b == "end_to_end" ? gradcheck_composed(o) : gradcheck_block(b, o);
    std::snprintf(line, sizeof line, "%-11s %12.3e %10.0e %8zu  %s\n", res.block.c_str(), res.max_rel_error,
                  res.tolerance, res.checks, res.worst.c_str());
    out << line;
    if (!res.passed()) {
      out << "FAIL " << res.block << " parameter " << res.worst << "\n";
      rc = kGradFail;
    }
  }
  return rc;
}

struct AugmentArgs {
  Common common;
  std::string ir, vis, out_dir;
};

inline int cmd_augment(const AugmentArgs& a, std::ostream& out) {
  Resolved r = resolve(a.common);
  const Tensor ir = load_image(a.ir), vis = load_image(a.vis);
  if (ir.shape() != vis.shape())
    throw DimensionError("ir and vis images differ in shape: " + shape_str(ir.shape()) + " vs " +
                         shape_str(vis.shape()));
  ensure_dir(a.out_dir);
  write_metadata(a.out_dir, "augment", r, {"ir_aug.ppm", "vis_aug.ppm", "record.txt"},
                 {"ir = " + a.ir, "vis = " + a.vis});
  AugConfig cfg = r.cfg.aug;
  cfg.enabled = true;
  Rng rng = Rng(r.cfg.seed).split(Stream::augment);
  AugResult res = cma_apply(ir, vis, cfg, rng);
  write_pnm(res.x, fs::path(a.out_dir) / "ir_aug.ppm");
  write_pnm(res.y, fs::path(a.out_dir) / "vis_aug.ppm");
  write_file(fs::path(a.out_dir) / "record.txt", res.record.to_text());
  out << res.record.to_text();
  return kOk;
}

struct TrainArgs {
  Common common;
  std::optional<std::size_t> steps;
  std::string out_ckpt, out_dir;
};

inline int cmd_train_toy(const TrainArgs& a, std::ostream& out) {
  Resolved r = resolve(a.common);
  const std::size_t steps = a.steps.value_or(r.cfg.train.steps);
  if (steps == 0) throw ConfigError("--steps must be positive");
  const fs::path dir = a.out_dir.empty() ? fs::path(a.out_ckpt).parent_path() : fs::path(a.out_dir);
  if (!dir.empty()) ensure_dir(dir);
  write_metadata(dir, "train-toy", r, {"loss_curve.csv", a.out_ckpt}, {"steps = " + std::to_string(steps)});
  TrainResult res = train_toy(r.cfg, steps, [&](std::size_t s, double loss) {
    if (s % 20 == 0 || s + 1 == steps) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "step %zu loss %.6f\n", s, loss);
      out << buf << std::flush;
    }
  });
  write_file(dir / "loss_curve.csv", loss_curve_csv(res.losses));
  save_checkpoint(res.params, a.out_ckpt);
  return kOk;
}

struct EvalArgs {
  Common common;
  std::string ckpt, data, missing = "none", out_dir;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  Resolved r = resolve(a.common);
  const Modality missing = parse_modality(a.missing);
  const ParamStore ps = load_matching_checkpoint(a.ckpt, r.cfg.model);
  const auto data = load_scene_dir(a.data, r.cfg.model.classes);
  for (const auto& s : data) check_image_pair(s.ir, s.vis);
  ensure_dir(a.out_dir);
  write_metadata(a.out_dir, "eval", r, {"report.csv", "report.txt"},
                 {"ckpt = " + a.ckpt, "data = " + a.data, "missing = " + to_string(missing),
                  "scenes = " + std::to_string(data.size())});
  EvalResult res = evaluate(data, ps, r.cfg.model, missing);
  const std::string table = report_table(res.report, "missing = " + to_string(missing));
  write_file(fs::path(a.out_dir) / "report.csv", report_csv(res.report));
  write_file(fs::path(a.out_dir) / "report.txt", table);
  out << table;
  return kOk;
}

struct GenDataArgs {
  Common common;
  std::string split = "eval", out_dir;
  std::optional<std::size_t> count;
};

inline int cmd_gen_data(const GenDataArgs& a, std::ostream& out) {
  Resolved r = resolve(a.common);
  Split split;
  if (a.split == "train") split = Split::train;
  else if (a.split == "eval") split = Split::eval;
  else throw ConfigError("--split must be train or eval, got " + a.split);
  const std::size_t n = a.count.value_or(split == Split::train ? r.cfg.data.train_count : r.cfg.data.eval_count);
  if (n == 0) throw ConfigError("--count must be positive");
  ensure_dir(a.out_dir);
  write_metadata(a.out_dir, "gen-data", r, {"<stem>_ir.ppm, <stem>_vis.ppm, <stem>_mask.pgm"},
                 {"split = " + a.split, "count = " + std::to_string(n)});
  const auto scenes = make_dataset(r.cfg.seed, split, n, r.cfg.data.size);
  char stem[32];
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    std::snprintf(stem, sizeof stem, "scene%04zu", i);
    write_scene(a.out_dir, stem, scenes[i]);
  }
  out << "wrote " << n << " scenes to " << a.out_dir << "\n";
  return kOk;
}

inline void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "config file (key = value lines)");
  sub->add_option("--seed", c.seed, "seed (overrides IVGF_SEED and the config)");
}

}  // namespace cli

/// Entry point; returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Infrared-visible fusion toy pipeline", "ivgf"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  cli::ForwardArgs fwd;
  auto* s_fwd = app.add_subcommand("forward", "segment one ir/vis pair");
  cli::add_common(s_fwd, fwd.common);
  s_fwd->add_option("--ir", fwd.ir, "infrared image (P5/P6)")->required();
  s_fwd->add_option("--vis", fwd.vis, "visible image (P5/P6)")->required();
  s_fwd->add_option("--ckpt", fwd.ckpt, "checkpoint (default: seed initialization)");
  s_fwd->add_option("--out-dir", fwd.out_dir, "output directory")->required();
  s_fwd->add_flag("--dump-features", fwd.dump_features, "write per-scale feature max projections");

  cli::GradcheckArgs gc;
  auto* s_gc = app.add_subcommand("gradcheck", "compare backward against finite differences");
  s_gc->add_option("--seed", gc.seed, "seed");
  s_gc->add_option("--trials", gc.trials, "random trials per block");
  s_gc->add_option("--inject-fault", gc.fault, "negate the backward of an op (testing)")->group("");

  cli::AugmentArgs aug;
  auto* s_aug = app.add_subcommand("augment", "apply cutout&mix to one pair");
  cli::add_common(s_aug, aug.common);
  s_aug->add_option("--ir", aug.ir, "infrared image")->required();
  s_aug->add_option("--vis", aug.vis, "visible image")->required();
  s_aug->add_option("--out-dir", aug.out_dir, "output directory")->required();

  cli::TrainArgs tr;
  auto* s_tr = app.add_subcommand("train-toy", "train on the synthetic task");
  cli::add_common(s_tr, tr.common);
  s_tr->add_option("--steps", tr.steps, "optimizer steps (default train.steps)");
  s_tr->add_option("--out-ckpt", tr.out_ckpt, "checkpoint to write")->required();
  s_tr->add_option("--out-dir", tr.out_dir, "metadata and loss curve (default: checkpoint directory)");

  cli::EvalArgs ev;
  auto* s_ev = app.add_subcommand("eval", "mIoU over a scene directory");
  cli::add_common(s_ev, ev.common);
  s_ev->add_option("--ckpt", ev.ckpt, "checkpoint")->required();
  s_ev->add_option("--data", ev.data, "scene directory (see gen-data)")->required();
  s_ev->add_option("--missing", ev.missing, "ir, vis or none");
  s_ev->add_option("--out-dir", ev.out_dir, "report directory")->required();

  cli::GenDataArgs gd;
  auto* s_gd = app.add_subcommand("gen-data", "write synthetic scenes as PNM files");
  cli::add_common(s_gd, gd.common);
  s_gd->add_option("--split", gd.split, "train or eval");
  s_gd->add_option("--count", gd.count, "number of scenes (default from config)");
  s_gd->add_option("--out-dir", gd.out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? kOk : kConfigErr;
  }

  try {
    if (*s_fwd) return cli::cmd_forward(fwd, out);
    if (*s_gc) return cli::cmd_gradcheck(gc, out);
    if (*s_aug) return cli::cmd_augment(aug, out);
    if (*s_tr) return cli::cmd_train_toy(tr, out);
    if (*s_ev) return cli::cmd_eval(ev, out);
    if (*s_gd) return cli::cmd_gen_data(gd, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigErr;
  } catch (const cli::IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kIoErr;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << " (byte " << e.byte_offset << ")\n";
    return kIoErr;
  } catch (const std::ios_base::failure& e) {
    err << "i/o error: " << e.what() << "\n";
    return kIoErr;
  } catch (const DimensionError& e) {
    err << "shape error: " << e.what() << "\n";
    return kShapeErr;
  } catch (const NonFiniteError& e) {
    err << "non-finite: " << e.what() << "\n";
    return kNonFinite;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kConfigErr;
  }
  return kConfigErr;
}

}  // namespace ivgf
