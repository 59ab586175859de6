#include "safe/report.hpp"

#include <cstdio>

namespace safe {

namespace {

using nlohmann::json;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void check_keys(const json& obj, const std::string& scope,
                std::initializer_list<const char*> allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed) {
      if (it.key() == k) {
        ok = true;
        break;
      }
    }
    if (!ok) throw ConfigError(scope.empty() ? it.key() : scope + "." + it.key(), "unknown key");
  }
}

template <typename T>
void read(const json& obj, const std::string& scope, const char* key, T& into) {
  if (!obj.contains(key)) return;
  std::string full = scope.empty() ? key : scope + "." + key;
  try {
    into = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(full, "wrong type");
  }
}

}  // namespace

json config_to_json(const RunConfig& cfg) {
  return json{
      {"clients", cfg.clients},
      {"rounds", cfg.rounds},
      {"local_epochs", cfg.local_epochs},
      {"clients_per_round", cfg.clients_per_round},
      {"fau_period", cfg.fau_period},
      {"learning_rate", cfg.learning_rate},
      {"batch_size", cfg.batch_size},
      {"seed", cfg.seed},
      {"workers", cfg.workers},
      {"toggles",
       {{"cro", cfg.toggles.cro},
        {"fau", cfg.toggles.fau},
        {"dmr", cfg.toggles.dmr},
        {"ace", cfg.toggles.ace}}},
      {"cro", {{"beta", cfg.cro.beta}}},
      {"ace",
       {{"tau_start", cfg.gumbel.tau_start},
        {"tau_end", cfg.gumbel.tau_end},
        {"dim", cfg.ace_dim}}},
      {"data",
       {{"classes", cfg.data.classes},
        {"samples_per_class", cfg.data.samples_per_class},
        {"imbalance_ratio", cfg.data.imbalance_ratio},
        {"dirichlet_alpha", cfg.data.dirichlet_alpha},
        {"ses_per_class", cfg.data.ses_per_class},
        {"image_size", cfg.data.image_size}}},
      {"model", {{"stage_channels", cfg.stage_channels}}},
  };
}

RunConfig config_from_json(const json& doc) {
  if (!doc.is_object()) throw ConfigError("<root>", "config must be a JSON object");
  check_keys(doc, "",
             {"clients", "rounds", "local_epochs", "clients_per_round", "fau_period",
              "learning_rate", "batch_size", "seed", "workers", "toggles", "cro", "ace", "data",
              "model"});
  RunConfig cfg;
  read(doc, "", "clients", cfg.clients);
  read(doc, "", "rounds", cfg.rounds);
  read(doc, "", "local_epochs", cfg.local_epochs);
  read(doc, "", "clients_per_round", cfg.clients_per_round);
  read(doc, "", "fau_period", cfg.fau_period);
  read(doc, "", "learning_rate", cfg.learning_rate);
  read(doc, "", "batch_size", cfg.batch_size);
  read(doc, "", "seed", cfg.seed);
  read(doc, "", "workers", cfg.workers);
  if (doc.contains("toggles")) {
    const json& t = doc.at("toggles");
    check_keys(t, "toggles", {"cro", "fau", "dmr", "ace"});
    read(t, "toggles", "cro", cfg.toggles.cro);
    read(t, "toggles", "fau", cfg.toggles.fau);
    read(t, "toggles", "dmr", cfg.toggles.dmr);
    read(t, "toggles", "ace", cfg.toggles.ace);
  }
  if (doc.contains("cro")) {
    const json& c = doc.at("cro");
    check_keys(c, "cro", {"beta"});
    read(c, "cro", "beta", cfg.cro.beta);
  }
  if (doc.contains("ace")) {
    const json& a = doc.at("ace");
    check_keys(a, "ace", {"tau_start", "tau_end", "dim"});
    read(a, "ace", "tau_start", cfg.gumbel.tau_start);
    read(a, "ace", "tau_end", cfg.gumbel.tau_end);
    read(a, "ace", "dim", cfg.ace_dim);
  }
  if (doc.contains("data")) {
    const json& d = doc.at("data");
    check_keys(d, "data",
               {"classes", "samples_per_class", "imbalance_ratio", "dirichlet_alpha",
                "ses_per_class", "image_size"});
    read(d, "data", "classes", cfg.data.classes);
    read(d, "data", "samples_per_class", cfg.data.samples_per_class);
    read(d, "data", "imbalance_ratio", cfg.data.imbalance_ratio);
    read(d, "data", "dirichlet_alpha", cfg.data.dirichlet_alpha);
    read(d, "data", "ses_per_class", cfg.data.ses_per_class);
    read(d, "data", "image_size", cfg.data.image_size);
  }
  if (doc.contains("model")) {
    const json& m = doc.at("model");
    check_keys(m, "model", {"stage_channels"});
    read(m, "model", "stage_channels", cfg.stage_channels);
  }
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    std::string key = msg.substr(0, msg.find(':'));
    throw ConfigError(key, msg.substr(std::min(msg.size(), msg.find(':') + 2)));
  }
  return cfg;
}

void apply_override(json& doc, const std::string& assignment) {
  size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError(assignment, "override must look like key=value");
  }
  std::string path = assignment.substr(0, eq);
  std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;  // treat unparseable values as strings

  // verify the dotted path names a real config key by probing a default doc
  json probe = config_to_json(RunConfig{});
  const json* cursor = &probe;
  json* target = &doc;
  size_t start = 0;
  while (true) {
    size_t dot = path.find('.', start);
    std::string part = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (!cursor->is_object() || !cursor->contains(part)) {
      throw ConfigError(path, "unknown key");
    }
    cursor = &cursor->at(part);
    if (dot == std::string::npos) {
      (*target)[part] = value;
      break;
    }
    target = &(*target)[part];
    start = dot + 1;
  }
}

json report_to_json(const RunReport& rep) {
  json rounds = json::array();
  for (const RoundRecord& r : rep.rounds) {
    rounds.push_back(json{
        {"round", r.round},
        {"eps_plus", r.eps_plus},
        {"eps_minus", r.eps_minus},
        {"tau", r.tau},
        {"cloud_c_acc", r.cloud_c_acc},
        {"cloud_s_acc", r.cloud_s_acc},
        {"mean_client_c_acc", r.mean_client_c_acc()},
        {"mean_client_s_acc", r.mean_client_s_acc()},
        {"client_c_acc", r.client_c_acc},
        {"client_s_acc", r.client_s_acc},
        {"d_cka", r.d_cka},
        {"cr_tilde", r.cr_tilde},
        {"ratio_cosine", r.ratio_cosine},
        {"trajectory", {r.trajectory[0], r.trajectory[1]}},
    });
  }
  return json{
      {"config", config_to_json(rep.config)},
      {"rounds", rounds},
      {"cloud_confusion", rep.cloud_confusion},
      {"duration_seconds", rep.duration_seconds},
  };
}

std::string rounds_csv(const RunReport& rep) {
  std::string out =
      "round,eps_plus,eps_minus,tau,cloud_c_acc,cloud_s_acc,mean_client_c_acc,"
      "mean_client_s_acc,ratio_cosine";
  for (int i = 0; i < rep.config.clients; ++i) out += ",d_cka_" + std::to_string(i);
  out += "\n";
  for (const RoundRecord& r : rep.rounds) {
    out += std::to_string(r.round);
    out += "," + fmt(r.eps_plus) + "," + fmt(r.eps_minus) + "," + fmt(r.tau);
    out += "," + fmt(r.cloud_c_acc) + "," + fmt(r.cloud_s_acc);
    out += "," + fmt(r.mean_client_c_acc()) + "," + fmt(r.mean_client_s_acc());
    out += "," + fmt(r.ratio_cosine);
    for (double d : r.d_cka) out += "," + fmt(d);
    out += "\n";
  }
  return out;
}

}  // namespace safe
