#include <cmath>
#include <fstream>
#include <sstream>

#include "crabs/orchestrator.hpp"
#include "json.hpp"

namespace crabs {

using json = nlohmann::ordered_json;

TaskSpec RunConfig::task_spec() const {
  try {
    return make_task(task_from_name(task));
  } catch (const std::exception& e) {
    throw ConfigError(std::string("field 'task': ") + e.what());
  }
}

void RunConfig::validate() const {
  task_spec();
  if (profile != "desk" && profile != "paper")
    throw ConfigError("field 'profile': must be 'desk' or 'paper', got '" +
                      profile + "'");
  auto positive = [](long long v, const char* name) {
    if (v <= 0)
      throw ConfigError(std::string("field '") + name + "': must be positive");
  };
  if (epochs < 0) throw ConfigError("field 'epochs': must be >= 0");
  positive(model_steps, "model_steps");
  positive(cert_iters, "cert_iters");
  positive(policy_steps, "policy_steps");
  positive(ensemble_k, "ensemble_k");
  positive(model_batch, "model_batch");
  positive(candidates, "candidates");
  positive(bootstrap_max_steps, "bootstrap_max_steps");
  positive(bootstrap_check_every, "bootstrap_check_every");
  positive(bootstrap_warmup, "bootstrap_warmup");
  positive(pretrain_trajectories, "pretrain_trajectories");
  positive(pretrain_steps, "pretrain_steps");
  positive(eval_episodes, "eval_episodes");
  positive(static_cast<long long>(volume_samples), "volume_samples");
  positive(uncertainty_probes, "uncertainty_probes");
  positive(sac.batch, "sac.batch");
  positive(sac.resample_cap, "sac.resample_cap");
  positive(sac.adversarial_stride, "sac.adversarial_stride");
  positive(shield.n_proposals, "shield.n_proposals");
  if (cert_lr <= 0) throw ConfigError("field 'cert_lr': must be positive");
  if (sac.lr <= 0) throw ConfigError("field 'sac.lr': must be positive");
  if (out_dir.empty()) throw ConfigError("field 'out_dir': must be non-empty");
  const std::vector<int>* widths[] = {&policy_hidden, &cert_hidden, &model_hidden};
  const char* names[] = {"policy_hidden", "cert_hidden", "model_hidden"};
  for (int i = 0; i < 3; ++i) {
    if (widths[i]->empty())
      throw ConfigError(std::string("field '") + names[i] +
                        "': must be non-empty");
    for (int w : *widths[i])
      if (w <= 0)
        throw ConfigError(std::string("field '") + names[i] +
                          "': widths must be positive");
  }
}

RunConfig make_profile(const std::string& task, const std::string& profile) {
  RunConfig cfg;
  cfg.task = task;
  cfg.profile = profile;
  cfg.out_dir = "runs/" + task;
  if (profile == "desk") return cfg;
  if (profile != "paper")
    throw ConfigError("field 'profile': must be 'desk' or 'paper', got '" +
                      profile + "'");
  cfg.epochs = 500;
  cfg.policy_hidden = {256, 256};
  cfg.cert_hidden = {256, 256};
  cfg.model_hidden = {400, 400, 400, 400};
  cfg.candidates = 10000;
  cfg.cert_iters = 2000;
  cfg.sac.batch = 256;
  cfg.bootstrap_max_steps = 100000;
  cfg.bootstrap_check_every = 10000;
  cfg.pretrain_trajectories = 500;
  cfg.pretrain_steps = 20000;
  cfg.volume_samples = 65536;
  return cfg;
}

namespace {

// Pull one field if present, naming the key in any error.
template <class T>
void get_to(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("field '") + key + "': " + e.what());
  }
}

void check_known(const json& j, std::initializer_list<const char*> known,
                 const std::string& scope) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known)
      if (it.key() == k) {
        ok = true;
        break;
      }
    if (!ok)
      throw ConfigError("unknown config field '" + scope + it.key() + "'");
  }
}

constexpr std::initializer_list<const char*> kTopKeys = {
    "task",           "profile",
    "seed",           "out_dir",
    "fixed_certificate",
    "epochs",         "model_steps",
    "cert_iters",     "policy_steps",
    "ensemble_k",     "model_batch",
    "policy_hidden",  "cert_hidden",
    "model_hidden",   "candidates",
    "lambda1",        "lambda2",
    "target_accept",  "lambda_reg",
    "cert_mala_steps", "cert_lr",
    "sac",            "shield",
    "bootstrap_max_steps", "bootstrap_check_every",
    "bootstrap_warmup",
    "pretrain_trajectories", "pretrain_steps",
    "eval_episodes",  "volume_samples",
    "uncertainty_probes",
    "handcrafted_c",  "handcrafted_thd_ref"};

constexpr std::initializer_list<const char*> kSacKeys = {
    "batch",         "gamma",           "lr",
    "target_update_rate", "c_penalty",  "target_entropy",
    "init_alpha",    "resample_cap",    "adversarial_stride",
    "mala_steps"};

constexpr std::initializer_list<const char*> kShieldKeys = {
    "n_proposals", "threshold", "extra_noise_scale"};

}  // namespace

RunConfig config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  check_known(j, kTopKeys, "");

  std::string task = "upright", profile = "desk";
  get_to(j, "task", task);
  get_to(j, "profile", profile);
  RunConfig cfg = make_profile(task, profile);

  get_to(j, "seed", cfg.seed);
  get_to(j, "out_dir", cfg.out_dir);
  get_to(j, "fixed_certificate", cfg.fixed_certificate);
  get_to(j, "epochs", cfg.epochs);
  get_to(j, "model_steps", cfg.model_steps);
  get_to(j, "cert_iters", cfg.cert_iters);
  get_to(j, "policy_steps", cfg.policy_steps);
  get_to(j, "ensemble_k", cfg.ensemble_k);
  get_to(j, "model_batch", cfg.model_batch);
  get_to(j, "policy_hidden", cfg.policy_hidden);
  get_to(j, "cert_hidden", cfg.cert_hidden);
  get_to(j, "model_hidden", cfg.model_hidden);
  get_to(j, "candidates", cfg.candidates);
  get_to(j, "lambda1", cfg.lambda1);
  get_to(j, "lambda2", cfg.lambda2);
  get_to(j, "target_accept", cfg.target_accept);
  get_to(j, "lambda_reg", cfg.lambda_reg);
  get_to(j, "cert_mala_steps", cfg.cert_mala_steps);
  get_to(j, "cert_lr", cfg.cert_lr);
  get_to(j, "bootstrap_max_steps", cfg.bootstrap_max_steps);
  get_to(j, "bootstrap_check_every", cfg.bootstrap_check_every);
  get_to(j, "bootstrap_warmup", cfg.bootstrap_warmup);
  get_to(j, "pretrain_trajectories", cfg.pretrain_trajectories);
  get_to(j, "pretrain_steps", cfg.pretrain_steps);
  get_to(j, "eval_episodes", cfg.eval_episodes);
  get_to(j, "volume_samples", cfg.volume_samples);
  get_to(j, "uncertainty_probes", cfg.uncertainty_probes);
  get_to(j, "handcrafted_c", cfg.handcrafted_c);
  get_to(j, "handcrafted_thd_ref", cfg.handcrafted_thd_ref);

  if (j.contains("sac")) {
    const json& s = j.at("sac");
    if (!s.is_object()) throw ConfigError("field 'sac': must be an object");
    check_known(s, kSacKeys, "sac.");
    get_to(s, "batch", cfg.sac.batch);
    get_to(s, "gamma", cfg.sac.gamma);
    get_to(s, "lr", cfg.sac.lr);
    get_to(s, "target_update_rate", cfg.sac.target_update_rate);
    get_to(s, "c_penalty", cfg.sac.c_penalty);
    if (s.contains("target_entropy") && !s.at("target_entropy").is_null())
      get_to(s, "target_entropy", cfg.sac.target_entropy);
    get_to(s, "init_alpha", cfg.sac.init_alpha);
    get_to(s, "resample_cap", cfg.sac.resample_cap);
    get_to(s, "adversarial_stride", cfg.sac.adversarial_stride);
    get_to(s, "mala_steps", cfg.sac.mala_steps);
  }
  if (j.contains("shield")) {
    const json& s = j.at("shield");
    if (!s.is_object()) throw ConfigError("field 'shield': must be an object");
    check_known(s, kShieldKeys, "shield.");
    get_to(s, "n_proposals", cfg.shield.n_proposals);
    get_to(s, "threshold", cfg.shield.threshold);
    get_to(s, "extra_noise_scale", cfg.shield.extra_noise_scale);
  }
  cfg.validate();
  return cfg;
}

std::string config_to_json_text(const RunConfig& cfg) {
  json j;
  j["task"] = cfg.task;
  j["profile"] = cfg.profile;
  j["seed"] = cfg.seed;
  j["out_dir"] = cfg.out_dir;
  j["fixed_certificate"] = cfg.fixed_certificate;
  j["epochs"] = cfg.epochs;
  j["model_steps"] = cfg.model_steps;
  j["cert_iters"] = cfg.cert_iters;
  j["policy_steps"] = cfg.policy_steps;
  j["ensemble_k"] = cfg.ensemble_k;
  j["model_batch"] = cfg.model_batch;
  j["policy_hidden"] = cfg.policy_hidden;
  j["cert_hidden"] = cfg.cert_hidden;
  j["model_hidden"] = cfg.model_hidden;
  j["candidates"] = cfg.candidates;
  j["lambda1"] = cfg.lambda1;
  j["lambda2"] = cfg.lambda2;
  j["target_accept"] = cfg.target_accept;
  j["lambda_reg"] = cfg.lambda_reg;
  j["cert_mala_steps"] = cfg.cert_mala_steps;
  j["cert_lr"] = cfg.cert_lr;
  json s;
  s["batch"] = cfg.sac.batch;
  s["gamma"] = cfg.sac.gamma;
  s["lr"] = cfg.sac.lr;
  s["target_update_rate"] = cfg.sac.target_update_rate;
  s["c_penalty"] = cfg.sac.c_penalty;
  if (std::isnan(cfg.sac.target_entropy))
    s["target_entropy"] = nullptr;  // resolved to -action_dim at build time
  else
    s["target_entropy"] = cfg.sac.target_entropy;
  s["init_alpha"] = cfg.sac.init_alpha;
  s["resample_cap"] = cfg.sac.resample_cap;
  s["adversarial_stride"] = cfg.sac.adversarial_stride;
  s["mala_steps"] = cfg.sac.mala_steps;
  j["sac"] = s;
  json sh;
  sh["n_proposals"] = cfg.shield.n_proposals;
  sh["threshold"] = cfg.shield.threshold;
  sh["extra_noise_scale"] = cfg.shield.extra_noise_scale;
  j["shield"] = sh;
  j["bootstrap_max_steps"] = cfg.bootstrap_max_steps;
  j["bootstrap_check_every"] = cfg.bootstrap_check_every;
  j["bootstrap_warmup"] = cfg.bootstrap_warmup;
  j["pretrain_trajectories"] = cfg.pretrain_trajectories;
  j["pretrain_steps"] = cfg.pretrain_steps;
  j["eval_episodes"] = cfg.eval_episodes;
  j["volume_samples"] = cfg.volume_samples;
  j["uncertainty_probes"] = cfg.uncertainty_probes;
  j["handcrafted_c"] = cfg.handcrafted_c;
  j["handcrafted_thd_ref"] = cfg.handcrafted_thd_ref;
  return j.dump(2) + "\n";
}

RunConfig config_from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json_text(ss.str());
}

}  // namespace crabs
