#include "fvi/config.hpp"

#include <fstream>
#include <functional>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>

#include "fvi/error.hpp"

namespace fvi {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw DomainError("config: '" + key + "' expects a number, got '" + v + "'");
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long out = 0;
  try {
    if (!v.empty() && v.front() != '-') out = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) {
    throw DomainError("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw DomainError("config: '" + key + "' expects true or false, got '" + v + "'");
}

struct Field {
  std::function<void(Config&, const std::string&)> set;
  std::function<std::string(const Config&)> get;
};

std::string fmt(double v) {
  std::ostringstream ss;
  ss << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return ss.str();
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
#define FVI_STRING(name) \
  t[#name] = {[](Config& c, const std::string& v) { c.name = v; }, [](const Config& c) { return c.name; }}
#define FVI_DOUBLE(name)                                                                      \
  t[#name] = {[](Config& c, const std::string& v) { c.name = to_double(#name, v); },          \
              [](const Config& c) { return fmt(c.name); }}
#define FVI_UINT(name)                                                                        \
  t[#name] = {[](Config& c, const std::string& v) { c.name = to_uint(#name, v); },            \
              [](const Config& c) { return std::to_string(c.name); }}
    FVI_STRING(task);
    FVI_STRING(likelihood);
    FVI_STRING(arch);
    FVI_STRING(hidden);
    FVI_STRING(output_dir);
    FVI_UINT(rank);
    FVI_DOUBLE(jitter);
    FVI_DOUBLE(noise_var);
    FVI_DOUBLE(prior_mean);
    FVI_DOUBLE(initial_scale);
    FVI_DOUBLE(initial_diag);
    FVI_DOUBLE(lr);
    FVI_DOUBLE(momentum);
    FVI_DOUBLE(weight_decay);
    FVI_DOUBLE(lr_decay);
    FVI_DOUBLE(grad_clip);
    FVI_UINT(epochs);
    FVI_UINT(batch_size);
    FVI_UINT(mc_samples);
    FVI_UINT(eval_samples);
    FVI_DOUBLE(inducing_noise_var);
    FVI_UINT(inducing_count);
    FVI_UINT(n_train);
    FVI_UINT(n_test);
    FVI_UINT(seed);
    FVI_UINT(data_seed);
#undef FVI_STRING
#undef FVI_DOUBLE
#undef FVI_UINT
    t["data_scale"] = {[](Config& c, const std::string& v) { c.data_scale = to_bool("data_scale", v); },
                       [](const Config& c) { return std::string(c.data_scale ? "true" : "false"); }};
    return t;
  }();
  return table;
}

void set_key(Config& config, const std::string& key, const std::string& value) {
  const auto it = fields().find(key);
  if (it == fields().end()) throw DomainError("config: unknown key '" + key + "'");
  it->second.set(config, value);
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, f] : fields()) keys.push_back(k);
  return keys;
}

Config parse_config(std::istream& in) {
  Config config;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw DomainError("config line " + std::to_string(number) + ": expected key = value");
    }
    set_key(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return config;
}

void apply_override(Config& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw DomainError("override '" + assignment + "': expected key=value");
  set_key(config, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void write_config(std::ostream& out, const Config& config) {
  for (const auto& [key, field] : fields()) out << key << " = " << field.get(config) << '\n';
}

std::vector<LayerSpec> parse_hidden(const std::string& text) {
  std::vector<LayerSpec> layers;
  std::istringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    const auto colon = item.find(':');
    const std::string kind = item.substr(0, colon);
    const std::string arg = colon == std::string::npos ? "" : item.substr(colon + 1);
    if (kind == "relu") {
      layers.push_back(LayerSpec::relu());
    } else if (kind == "dense") {
      layers.push_back(LayerSpec::dense(to_uint("hidden", arg)));
    } else if (kind == "conv") {
      layers.push_back(LayerSpec::conv(to_uint("hidden", arg)));
    } else if (kind == "upsample") {
      layers.push_back(LayerSpec::upsample(to_uint("hidden", arg)));
    } else {
      throw DomainError("hidden: unknown layer '" + item + "' (dense:N, conv:N, relu, upsample:N)");
    }
  }
  return layers;
}

namespace {

std::string builtin_for(const std::string& task) {
  if (task == "regression1d") return "regression1d";
  if (task == "minidepth") return "depth8";
  if (task == "miniseg") return "seg8";
  throw DomainError("config: unknown task '" + task + "' (regression1d, minidepth, miniseg)");
}

bool is_classification(const Config& config) { return config.task == "miniseg"; }

}  // namespace

ArchSpec config_arch(const Config& config) {
  ArchSpec arch;
  if (config.arch.empty()) {
    arch = builtin_arch(builtin_for(config.task));
  } else {
    std::ifstream in(config.arch);
    if (!in) throw DomainError("config: cannot open arch file '" + config.arch + "'");
    arch = parse_arch(in);
  }
  arch.noise_var = config.noise_var;
  if (config.prior_mean >= 0.0) arch.prior_mean = config.prior_mean;
  validate(arch);
  return arch;
}

LikelihoodFamily config_likelihood(const Config& config) {
  const std::string name =
      config.likelihood.empty() ? (is_classification(config) ? "boltzmann" : "gaussian") : config.likelihood;
  const FamilyTag tag = family_tag_from_string(name);
  if (is_classification(config) != (tag == FamilyTag::Boltzmann)) {
    throw DomainError("config: likelihood '" + name + "' does not fit task '" + config.task + "'");
  }
  switch (tag) {
    case FamilyTag::Gaussian: return LikelihoodFamily::gaussian();
    case FamilyTag::Laplace: return LikelihoodFamily::laplace();
    case FamilyTag::BerHu: return LikelihoodFamily::berhu(1.0);
    case FamilyTag::Boltzmann: return LikelihoodFamily::boltzmann(kSegClasses);
  }
  throw DomainError("config: unhandled likelihood");
}

TrainConfig config_train(const Config& config) {
  TrainConfig t;
  t.batch_size = config.batch_size;
  t.mc_samples = config.mc_samples;
  t.epochs = config.epochs;
  t.lr = config.lr;
  t.momentum = config.momentum;
  t.weight_decay = config.weight_decay;
  t.lr_decay = config.lr_decay;
  t.inducing_noise_var = config.inducing_noise_var;
  t.inducing_count = config.inducing_count;
  t.data_scale = config.data_scale;
  t.seed = config.seed;
  t.grad_clip = config.grad_clip;
  return t;
}

ToyDataset config_dataset(const Config& config) {
  return gen_task(config.task, config.n_train, config.data_seed, config.n_test);
}

FviModel config_model(const Config& config) {
  FviModel model;
  model.task = is_classification(config) ? TaskKind::Classification : TaskKind::Regression;
  model.prior = config_arch(config);
  model.likelihood = config_likelihood(config);
  std::string hidden = config.hidden;
  if (hidden.empty()) {
    hidden = config.task == "regression1d" ? "dense:64,relu,dense:64,relu" : "conv:32,relu,conv:32,relu";
  }
  VarFamilyOptions options;
  options.rank = config.rank;
  options.channels = model.classes();
  options.jitter = config.jitter;
  options.initial_scale = config.initial_scale;
  options.initial_diag = config.initial_diag;
  options.initial_mean = model.prior.prior_mean;
  model.family = make_var_family(model.prior.input, parse_hidden(hidden), options, config.seed);
  validate(model);
  return model;
}

}  // namespace fvi
