#include "experiment.hpp"

#include <cstdlib>
#include <map>

#include <CLI11.hpp>

namespace equiseg::tools {

namespace {

std::string on_off(bool v) { return v ? "on" : "off"; }

void flatten(const nlohmann::json& j, const std::string& prefix, std::vector<std::string>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string name = prefix.empty() ? it.key() : prefix + "." + it.key();
    const auto& v = it.value();
    if (v.is_object()) {
      flatten(v, name, out);
      continue;
    }
    if (v.is_array()) {
      out.push_back("--" + name);
      for (const auto& e : v) out.push_back(e.is_string() ? e.get<std::string>() : e.dump());
    } else if (v.is_string()) {
      out.push_back("--" + name + "=" + v.get<std::string>());
    } else if (v.is_boolean()) {
      out.push_back("--" + name + "=" + on_off(v.get<bool>()));
    } else {
      out.push_back("--" + name + "=" + v.dump());
    }
  }
}

}  // namespace

std::vector<std::string> config_tokens(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config file must hold an object");
  std::vector<std::string> out;
  flatten(j, "", out);
  return out;
}

std::size_t default_threads() {
  if (const char* env = std::getenv("EQUISEG_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
    throw ConfigError(std::string("EQUISEG_THREADS must be a positive integer, got '") + env + "'");
  }
  return 1;
}

nlohmann::json ExperimentConfig::provenance(const std::string& command) const {
  nlohmann::json j{{"tool", "equiseg"},
                   {"command", command},
                   {"seed", seed},
                   {"threads", threads},
                   {"model", model.to_json()},
                   {"dataset", dataset},
                   {"split", split}};
  if (command == "gen") {
    j["scene"] = scene.to_json();
    j["train_count"] = train_count;
    j["val_count"] = val_count;
  }
  if (command == "train") {
    j["schedule"] = schedule.to_json();
    j["checkpoint_every"] = checkpoint_every;
  }
  if (command == "eval" || command == "robust") {
    j["checkpoint"] = checkpoint_dir();
    j["modalities"] = modalities;
  }
  if (command == "robust") {
    j["protocol"] = protocol.to_json();
    j["emm"] = emm;
  }
  if (command == "gradcheck") {
    j["corrupt"] = corrupt;
    j["grad_seeds"] = grad_seeds;
    j["grad_tolerance"] = grad_tolerance;
  }
  return j;
}

void bind_options(CLI::App& app, ExperimentConfig& c, Command command) {
  app.add_option("--config", "JSON file of option values; flags given on the command line take precedence");
  app.add_option("--seed", c.seed, "Global seed")->capture_default_str();
  app.add_option("--threads", c.threads, "Worker threads for evaluation (env EQUISEG_THREADS)")
      ->check(CLI::PositiveNumber);

  auto& m = c.model;
  auto model_options = [&] {
    const std::map<std::string, HubMode> hubs{{"learned", HubMode::learned}, {"mean", HubMode::mean}};
    const std::map<std::string, PairingMode> pairings{{"random", PairingMode::random}, {"cosine", PairingMode::cosine}};
    const std::map<std::string, KlAxis> axes{{"channel", KlAxis::channel}, {"category", KlAxis::category}};
    const std::map<std::string, Profile> profiles{{"train", Profile::train}, {"test", Profile::test}};
    app.add_option("--model.decode-dim", m.decode_dim)->capture_default_str();
    app.add_option("--model.share-branches", m.encoder.share_branches, "on|off");
    app.add_option("--model.profile", m.profile)->transform(CLI::CheckedTransformer(profiles));
    app.add_option("--sq-hub", m.switches.hub, "learned|mean")->transform(CLI::CheckedTransformer(hubs));
    app.add_option("--cross-attention", m.switches.cross_attention, "on|off");
    app.add_option("--residual-add", m.switches.residual_add, "on|off");
    app.add_option("--prototype", m.sgm.prototype, "on|off");
    app.add_option("--sgm", m.sgm.enabled, "Self-guidance during training: on|off");
    app.add_option("--sgm.lambda", m.sgm.lambda, "Self-guidance weight")->capture_default_str()
        ->check(CLI::NonNegativeNumber);
    app.add_option("--sgm.pairing", m.sgm.pairing, "random|cosine")->transform(CLI::CheckedTransformer(pairings));
    app.add_option("--sgm.kl-axis", m.sgm.kl_axis, "channel|category")->transform(CLI::CheckedTransformer(axes));
  };

  switch (command) {
    case Command::gen:
      app.add_option("-o,--output", c.dataset, "Dataset root (train/ and val/ are created)")->capture_default_str();
      app.add_flag("--force", c.force, "Replace existing splits");
      app.add_option("--train-count", c.train_count)->capture_default_str();
      app.add_option("--val-count", c.val_count)->capture_default_str();
      app.add_option("--scene.height", c.scene.height)->capture_default_str();
      app.add_option("--scene.width", c.scene.width)->capture_default_str();
      app.add_option("--scene.categories", c.scene.categories)->capture_default_str();
      app.add_option("--scene.min-objects", c.scene.min_objects)->capture_default_str();
      app.add_option("--scene.max-objects", c.scene.max_objects)->capture_default_str();
      app.add_option("--scene.min-size", c.scene.min_size)->capture_default_str();
      app.add_option("--scene.max-size", c.scene.max_size)->capture_default_str();
      app.add_option("--scene.cell", c.scene.cell)->capture_default_str();
      app.add_option("--scene.ignore-border", c.scene.ignore_border)->capture_default_str();
      break;
    case Command::train:
      app.add_option("--dataset", c.dataset, "Dataset root")->capture_default_str();
      app.add_option("--split", c.split)->capture_default_str();
      app.add_option("-o,--output", c.output, "Run directory")->capture_default_str();
      model_options();
      app.add_option("--steps,--schedule.steps", c.schedule.steps)->capture_default_str();
      app.add_option("--batch,--schedule.batch", c.schedule.batch)->capture_default_str();
      app.add_option("--lr,--schedule.lr", c.schedule.lr)->capture_default_str();
      app.add_option("--schedule.warmup", c.schedule.warmup_fraction, "Warm-up fraction of the steps")
          ->capture_default_str();
      app.add_option("--schedule.poly-power", c.schedule.poly_power)->capture_default_str();
      app.add_option("--schedule.weight-decay", c.schedule.weight_decay)->capture_default_str();
      app.add_option("--checkpoint-every", c.checkpoint_every, "Also checkpoint every k steps")
          ->capture_default_str();
      app.add_option("--log-every", c.log_every, "Progress line interval on stdout")->capture_default_str();
      break;
    case Command::eval:
    case Command::robust:
      app.add_option("--checkpoint", c.checkpoint, "Checkpoint directory");
      app.add_option("--dataset", c.dataset, "Dataset root")->capture_default_str();
      app.add_option("--split", c.split)->capture_default_str();
      app.add_option("--modalities", c.modalities, "Restrict inputs to these modalities");
      app.add_option("--report", c.report, "Write the report to this file");
      if (command == Command::robust) {
        app.add_option("--emm", c.emm, "avg|p|all")->check(CLI::IsMember({"avg", "p", "all"}));
        app.add_option("--emm.p", c.protocol.emm_p)->capture_default_str();
        app.add_option("--rmm.p", c.protocol.rmm_p)->capture_default_str();
        app.add_option("--rmm.block", c.protocol.rmm_block)->capture_default_str();
        app.add_option("--rmm.avg-ps", c.protocol.rmm_avg_ps);
        app.add_option("--nm.low", c.protocol.nm_low)->capture_default_str();
        app.add_option("--nm.mid", c.protocol.nm_mid)->capture_default_str();
        app.add_flag("--self-test", c.self_test, "Check the robustness-score arithmetic on reference rows");
      }
      break;
    case Command::gradcheck:
      app.add_option("--corrupt", c.corrupt, "Scale the backward rule of this operation (negative control)");
      app.add_option("--grad.seeds", c.grad_seeds)->capture_default_str();
      app.add_option("--grad.tolerance", c.grad_tolerance)->capture_default_str();
      app.add_option("--grad.only", c.grad_only, "Run only these checks");
      app.add_option("--report", c.report, "Write the report to this file");
      break;
  }
}

}  // namespace equiseg::tools
