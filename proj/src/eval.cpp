#include "intapt/eval.hpp"

#include "intapt/error.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace intapt::eval {

namespace {

bool is_l1_split(corpus::Split s) {
  return s == corpus::Split::kL1Test || s == corpus::Split::kL1Dev;
}

bool is_eval_split(corpus::Split s) {
  return is_l1_split(s) || s == corpus::Split::kL2Test || s == corpus::Split::kL2Dev;
}

std::vector<const corpus::Utterance *> nonempty_split(const corpus::Corpus &c, corpus::Split s) {
  auto us = c.split(s);
  if (us.empty()) throw ConfigError("split " + corpus::to_string(s) + " is empty");
  return us;
}

}  // namespace

double weighted_all(const std::map<int, double> &accent, const std::map<int, int> &count) {
  double sum = 0.0;
  long n = 0;
  for (const auto &[a, w] : accent) {
    const int k = count.at(a);
    sum += w * k;
    n += k;
  }
  if (n == 0) throw ConfigError("weighted_all: no utterances");
  return sum / static_cast<double>(n);
}

WerTable eval_wer(const Recognizer &recognizer, const corpus::Corpus &corpus, corpus::Split split) {
  if (!is_eval_split(split)) {
    throw ConfigError("eval_wer: " + corpus::to_string(split) + " is not an evaluation split");
  }
  const bool l1 = is_l1_split(split);
  WerTable t;
  t.split = split;
  std::map<int, double> sums;
  for (const corpus::Utterance *u : nonempty_split(corpus, split)) {
    const bool is_l1_accent = corpus.group(u->accent_id) == AccentGroup::kL1;
    if (is_l1_accent != l1) {
      throw InvariantViolation("eval_wer: utterance " + u->id + " of accent " +
                               std::to_string(u->accent_id) + " found in " +
                               corpus::to_string(split));
    }
    sums[u->accent_id] += recognizer.wer(*u);
    t.accent_count[u->accent_id] += 1;
  }
  std::map<std::string, double> group_sums;
  for (const auto &[a, s] : sums) {
    const int n = t.accent_count[a];
    t.accent[a] = s / n;
    const std::string g = to_string(corpus.group(a));
    group_sums[g] += s;
    t.group_count[g] += n;
  }
  for (const auto &[g, s] : group_sums) t.group[g] = s / t.group_count[g];
  t.group[kAll] = weighted_all(t.accent, t.accent_count);
  int total = 0;
  for (const auto &[a, n] : t.accent_count) total += n;
  t.group_count[kAll] = total;
  return t;
}

Vector accent_feature(const Recognizer &recognizer, const AccentModule &am, const Matrix &features) {
  return am.extract(recognizer.run(features).input_tap());
}

CosineTable cosine_report(const Backbone &backbone, const AccentModule &am,
                          std::span<const CosineMethod> methods, const corpus::Corpus &corpus) {
  CosineTable t;
  const Recognizer plain(backbone);
  const auto l1 = nonempty_split(corpus, corpus::Split::kL1Test);
  t.l1_centroid = Vector::Zero(am.d_acc());
  for (const corpus::Utterance *u : l1) t.l1_centroid += accent_feature(plain, am, u->features);
  t.l1_centroid /= static_cast<double>(l1.size());

  const auto test = corpus.split(corpus::Split::kL2Test);
  std::map<int, int> counts;
  for (const corpus::Utterance *u : test) counts[u->accent_id] += 1;
  for (const corpus::AccentSpec &spec : corpus.accents()) {
    if (corpus.group(spec.accent_id) == AccentGroup::kL1) continue;
    if (counts[spec.accent_id] == 0) {
      throw ConfigError("cosine_report: accent " + std::to_string(spec.accent_id) +
                        " has no l2_test utterances");
    }
  }
  for (const CosineMethod &m : methods) {
    if (m.recognizer == nullptr) throw ConfigError("cosine_report: method " + m.name + " is null");
    std::map<int, double> &row = t.similarity[m.name];
    for (const corpus::Utterance *u : test) {
      row[u->accent_id] +=
          analysis::cosine(accent_feature(*m.recognizer, am, u->features), t.l1_centroid);
    }
    for (auto &[a, s] : row) s /= counts[a];
  }
  return t;
}

IsolationReport isolation_report(const Backbone &backbone, const AccentModule &am,
                                 const corpus::Corpus &corpus, std::uint64_t seed) {
  const Recognizer plain(backbone);
  const auto test = nonempty_split(corpus, corpus::Split::kL2Test);
  Matrix z(static_cast<Eigen::Index>(test.size()), am.d_acc());
  IsolationReport r;
  for (std::size_t i = 0; i < test.size(); ++i) {
    z.row(static_cast<Eigen::Index>(i)) = accent_feature(plain, am, test[i]->features).transpose();
    r.accent.push_back(test[i]->accent_id);
    r.nuisance.push_back(test[i]->nuisance);
  }
  r.projection = analysis::project_2d(z);
  r.accent_probe = analysis::linear_probe(z, r.accent, seed);
  r.nuisance_probe = analysis::linear_probe(z, r.nuisance, seed);
  return r;
}

AccentQuality accent_quality(const Backbone &backbone, const AccentModule &am,
                             const corpus::Corpus &corpus) {
  const Recognizer plain(backbone);
  const auto dev = accent_dev_set(corpus);
  if (dev.empty()) throw ConfigError("accent_quality: empty accent dev set");
  std::vector<double> predicted;
  std::vector<double> target;
  int correct = 0;
  for (const corpus::Utterance *u : dev) {
    const Vector z = accent_feature(plain, am, u->features);
    correct += am.predict_accent(z) == u->accent_id ? 1 : 0;
    predicted.push_back(am.predict_intensity(z));
    target.push_back(per_frame_ctc(backbone, *u));
  }
  return {static_cast<double>(correct) / static_cast<double>(dev.size()),
          analysis::pearson(predicted, target)};
}

Stat summarize(std::span<const double> values) {
  if (values.empty()) throw ConfigError("summarize: no values");
  Stat s;
  s.values.assign(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  for (double v : values) s.mean += v / n;
  if (values.size() >= 2) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / (n - 1.0));
  }
  return s;
}

// --- JSON -------------------------------------------------------------------

namespace {

nlohmann::json stat_json(const Stat &s) {
  nlohmann::json j = {{"mean", s.mean}, {"values", s.values}};
  j["std"] = s.std ? nlohmann::json(*s.std) : nlohmann::json(nullptr);
  return j;
}

Stat stat_from(const nlohmann::json &j) {
  Stat s;
  s.mean = j.at("mean").get<double>();
  s.values = j.at("values").get<std::vector<double>>();
  if (j.contains("std") && !j.at("std").is_null()) s.std = j.at("std").get<double>();
  return s;
}

template <class K>
nlohmann::json stat_map_json(const std::map<K, Stat> &m) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto &[k, v] : m) {
    if constexpr (std::is_same_v<K, std::string>) {
      j[k] = stat_json(v);
    } else {
      j[std::to_string(k)] = stat_json(v);
    }
  }
  return j;
}

std::map<int, Stat> int_stat_map(const nlohmann::json &j) {
  std::map<int, Stat> m;
  for (const auto &[k, v] : j.items()) m[std::stoi(k)] = stat_from(v);
  return m;
}

std::map<std::string, Stat> str_stat_map(const nlohmann::json &j) {
  std::map<std::string, Stat> m;
  for (const auto &[k, v] : j.items()) m[k] = stat_from(v);
  return m;
}

template <class V>
nlohmann::json int_keyed(const std::map<int, V> &m) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto &[k, v] : m) j[std::to_string(k)] = v;
  return j;
}

template <class V>
std::map<int, V> from_int_keyed(const nlohmann::json &j) {
  std::map<int, V> m;
  for (const auto &[k, v] : j.items()) m[std::stoi(k)] = v.template get<V>();
  return m;
}

nlohmann::json probe_json(const analysis::ProbeResult &p) {
  return {{"train_accuracy", p.train_accuracy},
          {"test_accuracy", p.test_accuracy},
          {"chance", p.chance}};
}

analysis::ProbeResult probe_from(const nlohmann::json &j) {
  return {j.at("train_accuracy").get<double>(), j.at("test_accuracy").get<double>(),
          j.at("chance").get<double>()};
}

}  // namespace

nlohmann::json to_json(const MetricsReport &r) {
  nlohmann::json methods = nlohmann::json::object();
  for (const auto &[name, m] : r.methods) {
    methods[name] = {{"l2_accent", stat_map_json(m.l2_accent)},
                     {"l2_group", stat_map_json(m.l2_group)},
                     {"l1_wer", stat_json(m.l1_wer)},
                     {"l1_delta", stat_json(m.l1_delta)},
                     {"cosine", stat_map_json(m.cosine)}};
  }
  nlohmann::json projection = nlohmann::json::array();
  for (Eigen::Index i = 0; i < r.isolation.projection.rows(); ++i) {
    projection.push_back({r.isolation.projection(i, 0), r.isolation.projection(i, 1)});
  }
  nlohmann::json runs = nlohmann::json::array();
  for (const RunSummary &s : r.runs) {
    runs.push_back({{"regime", s.regime},
                    {"seed", s.seed},
                    {"dir", s.dir},
                    {"selected_epoch", s.selected_epoch},
                    {"steps", s.steps},
                    {"trainable_parameters", s.trainable_parameters},
                    {"backbone_unchanged", s.backbone_unchanged},
                    {"am_unchanged", s.am_unchanged}});
  }
  return {{"schema_version", r.schema_version},
          {"config_hash", r.config_hash},
          {"corpus_hash", r.corpus_hash},
          {"seeds", r.seeds},
          {"groups", int_keyed(r.groups)},
          {"l2_test_count", int_keyed(r.l2_test_count)},
          {"l1_test_count", r.l1_test_count},
          {"backbone_l1_dev_wer", r.backbone_l1_dev_wer},
          {"accent_module",
           {{"dev_accuracy", r.accent_module.dev_accuracy},
            {"intensity_correlation", r.accent_module.intensity_correlation}}},
          {"isolation",
           {{"accent_probe", probe_json(r.isolation.accent_probe)},
            {"nuisance_probe", probe_json(r.isolation.nuisance_probe)},
            {"projection", projection},
            {"accent", r.isolation.accent},
            {"nuisance", r.isolation.nuisance}}},
          {"parameters",
           {{"backbone", r.parameters.backbone},
            {"prompt_generator", r.parameters.prompt_generator},
            {"critic", r.parameters.critic},
            {"ratio", r.parameters.ratio},
            {"cap", r.parameters.cap}}},
          {"methods", methods},
          {"runs", runs}};
}

MetricsReport report_from_json(const nlohmann::json &j) {
  try {
    MetricsReport r;
    r.schema_version = j.at("schema_version").get<int>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.corpus_hash = j.at("corpus_hash").get<std::string>();
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    r.groups = from_int_keyed<std::string>(j.at("groups"));
    r.l2_test_count = from_int_keyed<int>(j.at("l2_test_count"));
    r.l1_test_count = j.at("l1_test_count").get<int>();
    r.backbone_l1_dev_wer = j.at("backbone_l1_dev_wer").get<double>();
    const auto &am = j.at("accent_module");
    r.accent_module = {am.at("dev_accuracy").get<double>(),
                       am.at("intensity_correlation").get<double>()};
    const auto &iso = j.at("isolation");
    r.isolation.accent_probe = probe_from(iso.at("accent_probe"));
    r.isolation.nuisance_probe = probe_from(iso.at("nuisance_probe"));
    r.isolation.accent = iso.at("accent").get<std::vector<int>>();
    r.isolation.nuisance = iso.at("nuisance").get<std::vector<int>>();
    const auto &proj = iso.at("projection");
    r.isolation.projection.resize(static_cast<Eigen::Index>(proj.size()), 2);
    for (std::size_t i = 0; i < proj.size(); ++i) {
      r.isolation.projection(static_cast<Eigen::Index>(i), 0) = proj[i].at(0).get<double>();
      r.isolation.projection(static_cast<Eigen::Index>(i), 1) = proj[i].at(1).get<double>();
    }
    const auto &p = j.at("parameters");
    r.parameters = {p.at("backbone").get<std::size_t>(), p.at("prompt_generator").get<std::size_t>(),
                    p.at("critic").get<std::size_t>(), p.at("ratio").get<double>(),
                    p.at("cap").get<double>()};
    for (const auto &[name, m] : j.at("methods").items()) {
      MethodMetrics mm;
      mm.l2_accent = int_stat_map(m.at("l2_accent"));
      mm.l2_group = str_stat_map(m.at("l2_group"));
      mm.l1_wer = stat_from(m.at("l1_wer"));
      mm.l1_delta = stat_from(m.at("l1_delta"));
      mm.cosine = int_stat_map(m.at("cosine"));
      r.methods[name] = std::move(mm);
    }
    for (const auto &s : j.at("runs")) {
      r.runs.push_back({s.at("regime").get<std::string>(), s.at("seed").get<std::uint64_t>(),
                        s.at("dir").get<std::string>(), s.at("selected_epoch").get<int>(),
                        s.at("steps").get<long>(), s.at("trainable_parameters").get<std::size_t>(),
                        s.at("backbone_unchanged").get<bool>(), s.at("am_unchanged").get<bool>()});
    }
    return r;
  } catch (const nlohmann::json::exception &e) {
    throw InvariantViolation(std::string("report: ") + e.what());
  }
}

// --- validation -------------------------------------------------------------

namespace {

void check(bool ok, const std::string &what) {
  if (!ok) throw InvariantViolation("report check failed: " + what);
}

void check_stat(const Stat &s, std::size_t n_seeds, const std::string &where) {
  check(std::isfinite(s.mean), where + " mean is finite");
  check(s.values.size() == n_seeds, where + " has one value per seed");
  check(s.values.size() < 2 || s.std.has_value(), where + " has a std");
  double mean = 0.0;
  for (double v : s.values) mean += v / static_cast<double>(s.values.size());
  check(std::abs(mean - s.mean) < 1e-9, where + " mean matches its values");
}

}  // namespace

void validate_report(const nlohmann::json &j) {
  const MetricsReport r = report_from_json(j);
  check(r.schema_version == kReportSchemaVersion, "schema_version");
  check(!r.seeds.empty(), "seed list nonempty");
  for (const char *m : {"backbone", "finetune", "prompt_ctc", "intapt"}) {
    check(r.methods.count(m) == 1, std::string("method ") + m + " present");
  }
  for (const auto &[a, g] : r.groups) {
    check(g == "L1" || g == "MFA" || g == "LFA" || g == "UA", "group name of accent " + std::to_string(a));
  }
  const std::size_t n = r.seeds.size();
  for (const auto &[name, m] : r.methods) {
    check(m.l2_group.count(kAll) == 1, name + " has an ALL column");
    for (const auto &[a, s] : m.l2_accent) {
      check_stat(s, n, name + " accent " + std::to_string(a));
      check(r.l2_test_count.count(a) == 1, name + " accent " + std::to_string(a) + " has a count");
    }
    for (const auto &[g, s] : m.l2_group) check_stat(s, n, name + " group " + g);
    check_stat(m.l1_wer, n, name + " l1_wer");
    check_stat(m.l1_delta, n, name + " l1_delta");
    // ALL must be the utterance-weighted aggregate of the accents, per seed.
    const Stat &all = m.l2_group.at(kAll);
    for (std::size_t k = 0; k < all.values.size(); ++k) {
      std::map<int, double> col;
      for (const auto &[a, s] : m.l2_accent) col[a] = s.values.at(k);
      check(std::abs(weighted_all(col, r.l2_test_count) - all.values[k]) < 1e-9,
            name + " ALL equals the weighted accent mean (seed index " + std::to_string(k) + ")");
    }
    for (const auto &[a, s] : m.cosine) {
      check_stat(s, n, name + " cosine " + std::to_string(a));
      for (double v : s.values) check(v >= -1.0 - 1e-12 && v <= 1.0 + 1e-12, name + " cosine in [-1, 1]");
    }
  }
  for (const char *m : {"backbone", "prompt_ctc", "intapt"}) {
    check(!r.methods.at(m).cosine.empty(), std::string(m) + " has cosine similarities");
  }
  check(r.isolation.projection.rows() == static_cast<Eigen::Index>(r.isolation.accent.size()),
        "one projected point per utterance");
  check(r.isolation.nuisance.size() == r.isolation.accent.size(), "nuisance labels per point");
  check(r.parameters.backbone > 0, "backbone parameter count");
  check(std::abs(r.parameters.ratio - static_cast<double>(r.parameters.prompt_generator) /
                                          static_cast<double>(r.parameters.backbone)) < 1e-12,
        "parameter ratio");
}

// --- text tables --------------------------------------------------------------

namespace {

std::string cell(const Stat &s, double scale = 100.0) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << s.mean * scale;
  if (s.std) os << " ±" << std::setprecision(2) << *s.std * scale;
  return os.str();
}

void row(std::ostringstream &os, const std::string &label, const std::vector<std::string> &cells,
         int width) {
  os << std::left << std::setw(12) << label;
  for (const auto &c : cells) os << std::right << std::setw(width) << c;
  os << '\n';
}

}  // namespace

std::string format_tables(const MetricsReport &r) {
  const std::vector<std::string> order = {"backbone", "finetune", "prompt_ctc", "intapt"};
  std::ostringstream os;
  os << "Seeds:";
  for (auto s : r.seeds) os << ' ' << s;
  os << "\n\nL2 test WER (%), mean ± std over seeds\n";
  std::vector<std::string> header;
  std::vector<int> l2;
  for (const auto &[a, g] : r.groups) {
    if (g == "L1") continue;
    l2.push_back(a);
    header.push_back(g + std::to_string(a));
  }
  const std::vector<std::string> groups = {"MFA", "LFA", "UA", kAll};
  for (const auto &g : groups) header.push_back(g);
  const int w = 15;
  row(os, "method", header, w);
  for (const auto &name : order) {
    if (r.methods.count(name) == 0) continue;
    const MethodMetrics &m = r.methods.at(name);
    std::vector<std::string> cells;
    for (int a : l2) cells.push_back(m.l2_accent.count(a) ? cell(m.l2_accent.at(a)) : "-");
    for (const auto &g : groups) cells.push_back(m.l2_group.count(g) ? cell(m.l2_group.at(g)) : "-");
    row(os, name, cells, w);
  }

  os << "\nL1 test WER (%) and change against the frozen backbone\n";
  row(os, "method", {"L1", "delta"}, w);
  for (const auto &name : order) {
    if (r.methods.count(name) == 0) continue;
    const MethodMetrics &m = r.methods.at(name);
    row(os, name, {cell(m.l1_wer), cell(m.l1_delta)}, w);
  }

  os << "\nCosine similarity to the L1 accent centroid\n";
  std::vector<std::string> cos_header;
  for (int a : l2) cos_header.push_back(r.groups.at(a) + std::to_string(a));
  row(os, "method", cos_header, w);
  for (const auto &name : {"backbone", "prompt_ctc", "intapt"}) {
    if (r.methods.count(name) == 0) continue;
    const MethodMetrics &m = r.methods.at(name);
    std::vector<std::string> cells;
    for (int a : l2) cells.push_back(m.cosine.count(a) ? cell(m.cosine.at(a), 1.0) : "-");
    row(os, name, cells, w);
  }

  os << std::fixed << std::setprecision(3);
  os << "\nAccent module: dev accuracy " << r.accent_module.dev_accuracy
     << ", intensity correlation " << r.accent_module.intensity_correlation << '\n';
  os << "Isolation probes on l2_test z: accent " << r.isolation.accent_probe.test_accuracy
     << " (chance " << r.isolation.accent_probe.chance << "), nuisance "
     << r.isolation.nuisance_probe.test_accuracy << " (chance " << r.isolation.nuisance_probe.chance
     << ")\n";
  os << "Parameters: backbone " << r.parameters.backbone << ", prompt generator "
     << r.parameters.prompt_generator << " (ratio " << std::setprecision(4) << r.parameters.ratio
     << ", cap " << r.parameters.cap << "), critic " << r.parameters.critic << '\n';
  os << "Backbone L1 dev WER " << std::setprecision(4) << r.backbone_l1_dev_wer << '\n';
  return os.str();
}

}  // namespace intapt::eval
