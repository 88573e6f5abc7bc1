#include "commands.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include <CLI11.hpp>

#include "equiseg/dataset.hpp"
#include "equiseg/metrics.hpp"
#include "equiseg/params.hpp"
#include "grad_suite.hpp"

namespace fs = std::filesystem;

namespace equiseg::tools {

namespace {

void print_header(std::ostream& out, const ExperimentConfig& c, const std::string& command) {
  out << "# equiseg " << command << " " << c.provenance(command).dump() << "\n";
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw IoError("cannot write " + path.string());
}

Dataset load_split(const ExperimentConfig& c) {
  const fs::path dir = fs::path(c.dataset) / c.split;
  if (!fs::exists(dir / "manifest.json")) throw IoError("no dataset at " + dir.string());
  Dataset d = read_dataset(dir, c.modalities);
  if (d.samples.empty()) throw ConfigError("dataset " + dir.string() + " is empty");
  return d;
}

ModelConfig model_for(const ExperimentConfig& c, const DatasetManifest& m) {
  ModelConfig mc = c.model;
  mc.modality_names = m.modalities;
  mc.in_channels = m.channels;
  mc.categories = m.categories;
  mc.seed = c.seed;
  mc.validate();
  return mc;
}

template <typename T>
void save(const fs::path& dir, const SegModel<T>& model, std::size_t step, const nlohmann::json& provenance) {
  save_checkpoint(dir, model.params(), {{"model", model.config().to_json()}, {"step", step}, {"provenance", provenance}});
}

template <typename T>
int train_impl(const ExperimentConfig& c, std::ostream& out) {
  const Dataset data = load_split(c);
  SegModel<T> model(model_for(c, data.manifest));
  const auto bundles = data.bundles<T>();
  const auto labels = data.labels();
  const fs::path run(c.output);
  fs::create_directories(run);
  const auto provenance = c.provenance("train");
  write_text(run / "provenance.json", provenance.dump(2) + "\n");
  if (c.schedule.steps == 0) {
    save(run / "checkpoint", model, 0, provenance);
    out << "steps=0: wrote initial checkpoint to " << (run / "checkpoint").string() << "\n";
    return kExitOk;
  }
  Trainer<T> trainer(model, c.schedule, c.seed);
  MetricsLog log(run / "metrics.jsonl");
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t s = 0; s < c.schedule.steps; ++s) {
    const auto m = trainer.step(bundles, labels);
    log.write(m);
    if (c.log_every != 0 && (s % c.log_every == 0 || s + 1 == c.schedule.steps)) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "step %5zu  L %.5f  L_CE %.5f  L_s %.5f  lr %.3g", m.step, m.loss, m.ce, m.sgm,
                    m.lr);
      out << buf << "\n";
    }
    if (c.checkpoint_every != 0 && (s + 1) % c.checkpoint_every == 0 && s + 1 != c.schedule.steps)
      save(run / ("checkpoint-" + std::to_string(s + 1)), model, s + 1, provenance);
  }
  save(run / "checkpoint", model, c.schedule.steps, provenance);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out << "trained " << c.schedule.steps << " steps in " << secs << " s; checkpoint " << (run / "checkpoint").string()
      << "\n";
  return kExitOk;
}

nlohmann::json checkpoint_meta(const ExperimentConfig& c) {
  const auto manifest = read_checkpoint_manifest(c.checkpoint_dir());
  if (!manifest.contains("meta") || !manifest["meta"].contains("model"))
    throw IoError("checkpoint " + c.checkpoint_dir() + " has no model description");
  return manifest;
}

template <typename T>
SegModel<T> load_model(const ExperimentConfig& c, const nlohmann::json& manifest, const DatasetManifest& data) {
  SegModel<T> model(ModelConfig::from_json(manifest["meta"]["model"]));
  load_checkpoint(c.checkpoint_dir(), model.params());
  const auto& mc = model.config();
  if (mc.modality_names != data.modalities || mc.categories != data.categories)
    throw ConfigError("checkpoint and dataset disagree on modalities or categories");
  return model;
}

template <typename T>
int eval_impl(const ExperimentConfig& c, const nlohmann::json& manifest, std::ostream& out) {
  const Dataset data = load_split(c);
  const auto model = load_model<T>(c, manifest, data.manifest);
  const auto bundles = data.bundles<T>();
  const auto labels = data.labels();
  const auto iou = evaluate<T>(model, bundles, labels, {}, c.threads).iou();
  nlohmann::json per = nlohmann::json::array();
  for (const auto& v : iou.per_category) per.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
  nlohmann::json report{{"provenance", c.provenance("eval")},
                        {"samples", data.samples.size()},
                        {"miou", iou.mean},
                        {"per_category_iou", per}};
  char buf[96];
  std::snprintf(buf, sizeof buf, "mIoU %.4f over %zu samples\n", iou.mean, data.samples.size());
  out << buf;
  for (std::size_t k = 0; k < iou.per_category.size(); ++k) {
    if (iou.per_category[k])
      std::snprintf(buf, sizeof buf, "  category %zu  IoU %.4f\n", k, *iou.per_category[k]);
    else
      std::snprintf(buf, sizeof buf, "  category %zu  absent\n", k);
    out << buf;
  }
  if (!c.report.empty()) write_text(c.report, report.dump(2) + "\n");
  return kExitOk;
}

template <typename T>
int robust_impl(const ExperimentConfig& c, const nlohmann::json& manifest, std::ostream& out) {
  const Dataset data = load_split(c);
  const auto model = load_model<T>(c, manifest, data.manifest);
  const auto bundles = data.bundles<T>();
  const auto labels = data.labels();
  RobustnessProtocol protocol = c.protocol;
  protocol.seed = c.seed;
  protocol.threads = c.threads;
  nlohmann::json report{{"provenance", c.provenance("robust")}, {"samples", data.samples.size()}};
  char buf[160];
  auto log_subsets = [&](const std::vector<EmmSubsetResult>& subsets) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& s : subsets) {
      std::string kept;
      for (std::size_t i = 0; i < s.keep.size(); ++i)
        if (s.keep[i]) kept += (kept.empty() ? "" : "+") + data.manifest.modalities[i];
      std::snprintf(buf, sizeof buf, "EMM subset %-32s mIoU %.4f\n", kept.c_str(), s.miou);
      out << buf;
      arr.push_back({{"keep", kept}, {"miou", s.miou}});
    }
    return arr;
  };
  if (c.emm == "all") {
    std::vector<EmmSubsetResult> subsets;
    emm_eval<T>(model, bundles, labels, {true, 0.0}, protocol.seed, protocol.threads, &subsets);
    report["emm_subsets"] = log_subsets(subsets);
    const auto r = run_robustness<T>(model, bundles, labels, protocol);
    const auto j = report_to_json(r, protocol);
    report["protocol"] = j["protocol"];
    report["units"] = j["units"];
    report["metrics"] = j["metrics"];
    out << format_report_table(r, "equiseg");
  } else if (c.emm == "avg") {
    std::vector<EmmSubsetResult> subsets;
    const double v = emm_eval<T>(model, bundles, labels, {true, 0.0}, protocol.seed, protocol.threads, &subsets);
    report["protocol"] = protocol.to_json();
    report["emm_subsets"] = log_subsets(subsets);
    report["metrics"] = {{"EMM(Avg)", 100.0 * v}};
    std::snprintf(buf, sizeof buf, "EMM(Avg) %.2f over %zu subsets\n", 100.0 * v, subsets.size());
    out << buf;
  } else {
    const double v = emm_eval<T>(model, bundles, labels, {false, protocol.emm_p}, protocol.seed, protocol.threads);
    report["protocol"] = protocol.to_json();
    report["metrics"] = {{"EMM(p)", 100.0 * v}};
    std::snprintf(buf, sizeof buf, "EMM(p=%.2f) %.2f\n", protocol.emm_p, 100.0 * v);
    out << buf;
  }
  if (!c.report.empty()) write_text(c.report, report.dump(2) + "\n");
  return kExitOk;
}

int robust_self_test(std::ostream& out) {
  struct Row {
    const char* name;
    std::array<double, 7> values;
    double expected;
  };
  const Row rows[] = {
      {"DeLiVER", {67.90, 48.22, 65.75, 50.96, 64.64, 34.87, 19.13}, 50.21},
      {"MUSES", {50.26, 35.63, 45.06, 38.61, 47.63, 20.47, 12.62}, 35.75},
  };
  bool ok = true;
  char buf[128];
  for (const auto& row : rows) {
    std::vector<std::optional<double>> v(row.values.begin(), row.values.end());
    const double score = robustness_score(v);
    const double rounded = std::round(score * 100.0) / 100.0;
    const bool pass = std::abs(rounded - row.expected) < 1e-9;
    ok = ok && pass;
    std::snprintf(buf, sizeof buf, "self-test %-8s mean %.4f -> %.2f (expected %.2f) %s\n", row.name, score, rounded,
                  row.expected, pass ? "PASS" : "FAIL");
    out << buf;
  }
  return ok ? kExitOk : kExitNumeric;
}

template <typename F>
int dispatch_dtype(const nlohmann::json& manifest, F&& f) {
  const auto dtype = manifest.value("dtype", std::string("f32"));
  if (dtype == "f64") return f(double{});
  if (dtype == "f32") return f(float{});
  throw IoError("checkpoint dtype '" + dtype + "' unsupported");
}

}  // namespace

int cmd_gen(const ExperimentConfig& c, std::ostream& out) {
  c.scene.validate();
  if (c.train_count == 0) throw ConfigError("train-count must be positive");
  const fs::path root(c.dataset);
  for (const char* split : {"train", "val"}) {
    const fs::path dir = root / split;
    if (fs::exists(dir) && !fs::is_empty(dir)) {
      if (!c.force) throw IoError(dir.string() + " already exists; pass --force to replace it");
      if (!fs::exists(dir / "manifest.json"))
        throw IoError(dir.string() + " is not a dataset directory; refusing to replace it");
      fs::remove_all(dir);
    }
  }
  print_header(out, c, "gen");
  nlohmann::json generator{{"scene", c.scene.to_json()}, {"seed", c.seed}};
  const auto train = generate_samples(c.scene, c.seed, c.train_count, 0);
  generator["first_index"] = 0;
  write_dataset(root / "train", train, c.scene.categories, generator);
  out << "train: " << train.size() << " samples -> " << (root / "train").string() << "\n";
  if (c.val_count > 0) {
    const auto val = generate_samples(c.scene, c.seed, c.val_count, c.train_count);
    generator["first_index"] = c.train_count;
    write_dataset(root / "val", val, c.scene.categories, generator);
    out << "val: " << val.size() << " samples -> " << (root / "val").string() << "\n";
  }
  out << "categories " << c.scene.categories << ", " << c.scene.height << "x" << c.scene.width << ", modalities";
  for (const auto& n : default_modality_names()) out << " " << n;
  out << "\n";
  return kExitOk;
}

int cmd_train(const ExperimentConfig& c, std::ostream& out) {
  c.schedule.validate();
  print_header(out, c, "train");
  if (c.model.profile == Profile::test) return train_impl<double>(c, out);
  return train_impl<float>(c, out);
}

int cmd_eval(const ExperimentConfig& c, std::ostream& out) {
  print_header(out, c, "eval");
  const auto manifest = checkpoint_meta(c);
  return dispatch_dtype(manifest, [&](auto tag) { return eval_impl<decltype(tag)>(c, manifest, out); });
}

int cmd_robust(const ExperimentConfig& c, std::ostream& out) {
  print_header(out, c, "robust");
  if (c.self_test) return robust_self_test(out);
  const auto manifest = checkpoint_meta(c);
  return dispatch_dtype(manifest, [&](auto tag) { return robust_impl<decltype(tag)>(c, manifest, out); });
}

int cmd_gradcheck(const ExperimentConfig& c, std::ostream& out) {
  print_header(out, c, "gradcheck");
  if (!c.corrupt.empty()) {
    const auto names = grad_suite_names();
    if (std::find(names.begin(), names.end(), c.corrupt) == names.end())
      throw ConfigError("--corrupt: unknown operation '" + c.corrupt + "'");
  }
  GradSuiteOptions o;
  o.seeds = c.grad_seeds;
  o.base_seed = c.seed;
  o.tolerance = c.grad_tolerance;
  o.only = c.grad_only;
  set_gradient_fault(c.corrupt);
  GradSuiteReport report;
  try {
    report = run_grad_suite(o);
  } catch (...) {
    set_gradient_fault("");
    throw;
  }
  set_gradient_fault("");
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-22s %14s %10s  %s\n", "operation", "max rel err", "entries", "result");
  out << buf;
  for (const auto& k : report.checks) {
    std::snprintf(buf, sizeof buf, "%-22s %14.3e %10zu  %s\n", k.op.c_str(), k.max_rel_error, k.checked,
                  k.passed ? "PASS" : "FAIL");
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "worst %.3e (tolerance %.1e): %s\n", report.worst, c.grad_tolerance,
                report.passed ? "PASS" : "FAIL");
  out << buf;
  if (!c.report.empty()) {
    auto j = report.to_json();
    j["provenance"] = c.provenance("gradcheck");
    write_text(c.report, j.dump(2) + "\n");
  }
  return report.passed ? kExitOk : kExitNumeric;
}

namespace {

// Canonical name of an option token, folding the short aliases.
std::string option_name(const std::string& token) {
  if (token == "-o") return "--output";
  if (token.rfind("--", 0) != 0) return {};
  const std::string name = token.substr(0, token.find('='));
  static const std::map<std::string, std::string> aliases{
      {"--steps", "--schedule.steps"}, {"--batch", "--schedule.batch"}, {"--lr", "--schedule.lr"}};
  const auto it = aliases.find(name);
  return it == aliases.end() ? name : it->second;
}

// File options that also appear on the command line are dropped so flags win.
std::vector<std::string> merge_config(const std::vector<std::string>& file_tokens,
                                      const std::vector<std::string>& cli_tokens) {
  std::set<std::string> given;
  for (const auto& t : cli_tokens)
    if (auto n = option_name(t); !n.empty()) given.insert(n);
  std::vector<std::string> merged;
  bool skipping = false;
  for (const auto& t : file_tokens) {
    if (auto n = option_name(t); !n.empty()) skipping = given.count(n) != 0;
    if (!skipping) merged.push_back(t);
  }
  merged.insert(merged.end(), cli_tokens.begin(), cli_tokens.end());
  return merged;
}

std::vector<std::string> expand_config(const std::vector<std::string>& tokens) {
  std::vector<std::string> rest;
  std::string path;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == "--config") {
      if (i + 1 >= tokens.size()) throw ConfigError("--config needs a file");
      path = tokens[++i];
    } else if (tokens[i].rfind("--config=", 0) == 0) {
      path = tokens[i].substr(9);
    } else {
      rest.push_back(tokens[i]);
    }
  }
  if (path.empty()) return rest;
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
  return merge_config(config_tokens(j), rest);
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    ExperimentConfig config;
    config.threads = default_threads();
    CLI::App app{"Multimodal segmentation with equal-contribution fusion and self-guided training", "equiseg"};
    app.require_subcommand(1);
    struct Sub {
      const char* name;
      const char* help;
      Command command;
    };
    const Sub subs[] = {
        {"gen", "Generate the synthetic dataset", Command::gen},
        {"train", "Train a model", Command::train},
        {"eval", "Evaluate mIoU of a checkpoint", Command::eval},
        {"robust", "Run the missing/noisy modality benchmark", Command::robust},
        {"gradcheck", "Verify analytic gradients against finite differences", Command::gradcheck},
    };
    for (const auto& s : subs) bind_options(*app.add_subcommand(s.name, s.help), config, s.command);

    std::vector<std::string> tokens = args;
    if (!tokens.empty() && tokens[0].rfind("-", 0) != 0) {
      std::vector<std::string> rest(tokens.begin() + 1, tokens.end());
      rest = expand_config(rest);
      rest.insert(rest.begin(), tokens[0]);
      tokens = std::move(rest);
    }
    std::reverse(tokens.begin(), tokens.end());
    try {
      app.parse(tokens);
    } catch (const CLI::ParseError& e) {
      const int code = app.exit(e, out, err);
      return code == 0 ? kExitOk : kExitConfig;
    }
    const std::string name = app.get_subcommands().front()->get_name();
    if (name == "gen") return cmd_gen(config, out);
    if (name == "train") return cmd_train(config, out);
    if (name == "eval") return cmd_eval(config, out);
    if (name == "robust") return cmd_robust(config, out);
    return cmd_gradcheck(config, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ShapeError& e) {
    err << "invalid input: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "i/o error: " << e.what() << "\n";
    return kExitIo;
  }
}

}  // namespace equiseg::tools
