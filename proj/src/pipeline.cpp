#include "intapt/pipeline.hpp"

#include "intapt/error.hpp"
#include "intapt/hash.hpp"
#include "intapt/json_io.hpp"

#include <spdlog/spdlog.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace intapt::pipeline {

namespace {

std::string read_key(const fs::path &artifact) {
  std::ifstream is(artifact.string() + ".key");
  std::string key;
  if (is) std::getline(is, key);
  return key;
}

void write_key(const fs::path &artifact, const std::string &key) {
  std::ofstream os(artifact.string() + ".key");
  os << key << '\n';
  if (!os) throw StageError("cannot write key for " + artifact.string());
}

bool cached(const fs::path &artifact, const std::string &key) {
  return fs::exists(artifact) && read_key(artifact) == key;
}

/// Runs `f`, prefixing any error with the stage name while keeping its
/// exit category.
template <class F>
auto in_stage(const std::string &name, F &&f) -> decltype(f()) {
  const std::string prefix = "stage " + name + ": ";
  try {
    return f();
  } catch (const ConfigError &e) {
    throw ConfigError(prefix + e.what());
  } catch (const InvariantViolation &e) {
    throw InvariantViolation(prefix + e.what());
  } catch (const StageError &e) {
    throw StageError(prefix + e.what());
  } catch (const std::exception &e) {
    throw StageError(prefix + e.what());
  }
}

std::string section_hash(const nlohmann::json &j) { return sha256_hex(j.dump()); }

nlohmann::json pretrain_json(const PretrainReport &r) {
  return {{"train_loss", r.train_loss}, {"dev_wer", r.dev_wer}, {"epochs", r.epochs},
          {"final_dev_wer", r.final_dev_wer}, {"converged", r.converged}};
}

nlohmann::json accent_json(const AccentTrainReport &r) {
  return {{"train_loss", r.train_loss},
          {"dev_loss", r.dev_loss},
          {"dev_accuracy", r.dev_accuracy},
          {"selected_epoch", r.selected_epoch},
          {"max_decomposition_error", r.max_decomposition_error}};
}

}  // namespace

fs::path output_root(const std::optional<fs::path> &flag) {
  if (flag && !flag->empty()) return *flag;
  if (const char *env = std::getenv(kOutputRootEnv); env != nullptr && *env != '\0') {
    return fs::path(env);
  }
  return fs::path("intapt-out");
}

fs::path Layout::run(Regime regime, std::uint64_t seed) const {
  return dir / "runs" / to_string(regime) / ("seed-" + std::to_string(seed));
}

std::string corpus_key(const ExperimentConfig &c) { return corpus_hash(c); }

std::string backbone_key(const ExperimentConfig &c) {
  return section_hash({{"corpus", corpus_key(c)}, {"backbone", c.backbone}, {"pretrain", c.pretrain}});
}

std::string accent_key(const ExperimentConfig &c) {
  return section_hash({{"backbone", backbone_key(c)}, {"accent", c.accent}});
}

std::string run_key(const ExperimentConfig &c, Regime regime, std::uint64_t seed) {
  nlohmann::json j = {{"backbone", backbone_key(c)},
                      {"regime", to_string(regime)},
                      {"experiment_seed", c.seed},
                      {"seed", seed},
                      {"train", c.train}};
  // Only the settings a regime reads enter its key.
  auto &train = j["train"];
  train.erase(uses_prompt(regime) ? "lr_finetune" : "lr_prompt");
  if (regime != Regime::kIntapt) {
    train.erase("lambda_mi");
    train.erase("critic_steps");
  }
  if (uses_prompt(regime)) j["prompt"] = c.prompt;
  if (regime == Regime::kIntapt) {
    j["accent"] = accent_key(c);
    j["mine"] = c.mine;
  }
  return section_hash(j);
}

Layout prepare(const ExperimentConfig &config, const fs::path &dir) {
  ExperimentConfig c = config;
  validate(c);
  Layout l{dir};
  fs::create_directories(dir);
  save_config(l.config(), c);
  return l;
}

corpus::Corpus gen_data(const ExperimentConfig &c, const Layout &l, bool *reused) {
  return in_stage("gen-data", [&] {
    const std::string key = corpus_key(c);
    if (fs::exists(l.corpus())) {
      const corpus::CorpusFileInfo info = corpus::inspect_corpus(l.corpus());
      if (info.config_hash == key) {
        if (reused) *reused = true;
        spdlog::info("gen-data: reusing {}", l.corpus().string());
        return corpus::load_corpus(l.corpus());
      }
      spdlog::info("gen-data: cached corpus has another config hash, regenerating");
    }
    if (reused) *reused = false;
    corpus::Corpus corpus = corpus::build_corpus(c);
    fs::create_directories(l.corpus().parent_path());
    corpus::save_corpus(l.corpus(), corpus);
    spdlog::info("gen-data: {} utterances -> {}", corpus.utterances().size(), l.corpus().string());
    return corpus;
  });
}

Backbone pretrain_stage(const ExperimentConfig &c, const Layout &l, const corpus::Corpus &corpus,
                        bool *reused) {
  return in_stage("pretrain", [&] {
    const std::string key = backbone_key(c);
    if (cached(l.backbone(), key)) {
      if (reused) *reused = true;
      spdlog::info("pretrain: reusing {}", l.backbone().string());
      return Backbone::load(l.backbone());
    }
    if (reused) *reused = false;
    PretrainReport report;
    Backbone backbone = pretrain(corpus, c, &report);
    fs::create_directories(l.backbone().parent_path());
    backbone.save(l.backbone(), {{"key", key}});
    write_json(l.pretrain_report(), pretrain_json(report));
    write_key(l.backbone(), key);
    spdlog::info("pretrain: {} epochs, L1 dev WER {:.4f}", report.epochs, report.final_dev_wer);
    return backbone;
  });
}

AccentModule train_am_stage(const ExperimentConfig &c, const Layout &l,
                            const corpus::Corpus &corpus, const Backbone &backbone,
                            bool *reused) {
  return in_stage("train-am", [&] {
    const std::string key = accent_key(c);
    if (cached(l.accent_module(), key)) {
      if (reused) *reused = true;
      spdlog::info("train-am: reusing {}", l.accent_module().string());
      return AccentModule::load(l.accent_module());
    }
    if (reused) *reused = false;
    AccentTrainReport report;
    AccentModule am = train_am(corpus, backbone, c, &report);
    fs::create_directories(l.accent_module().parent_path());
    am.save(l.accent_module(), {{"key", key}});
    write_json(l.accent_report(), accent_json(report));
    write_key(l.accent_module(), key);
    spdlog::info("train-am: epoch {} selected, dev accuracy {:.3f}", report.selected_epoch,
                 report.dev_accuracy.at(static_cast<std::size_t>(report.selected_epoch)));
    return am;
  });
}

RunCheckpoint train_stage(const ExperimentConfig &c, const Layout &l, Regime regime,
                          std::uint64_t seed, const corpus::Corpus &corpus,
                          const Backbone &backbone, const AccentModule &am, bool *reused) {
  return in_stage("train " + to_string(regime) + " seed " + std::to_string(seed), [&] {
    const fs::path dir = l.run(regime, seed);
    const fs::path marker = dir / "run.json";
    const std::string key = run_key(c, regime, seed);
    if (cached(marker, key)) {
      if (reused) *reused = true;
      spdlog::info("train: reusing {}", dir.string());
      return RunCheckpoint::load(dir);
    }
    if (reused) *reused = false;
    RunCheckpoint ck = train_regime(regime, corpus, backbone, &am, c, seed);
    ck.save(dir);
    write_key(marker, key);
    spdlog::info("train {} seed {}: epoch {} selected, dev WER {:.4f}, {} steps", to_string(regime),
                 seed, ck.selected_epoch,
                 ck.history.at(static_cast<std::size_t>(ck.selected_epoch)).dev_wer, ck.steps);
    return ck;
  });
}

// --- report -------------------------------------------------------------------

namespace {

struct SeedTables {
  eval::WerTable l2;
  eval::WerTable l1;
};

void append(std::map<int, std::vector<double>> &dst, const std::map<int, double> &src) {
  for (const auto &[k, v] : src) dst[k].push_back(v);
}
void append(std::map<std::string, std::vector<double>> &dst,
            const std::map<std::string, double> &src) {
  for (const auto &[k, v] : src) dst[k].push_back(v);
}

template <class K>
std::map<K, eval::Stat> summarize_all(const std::map<K, std::vector<double>> &m) {
  std::map<K, eval::Stat> out;
  for (const auto &[k, v] : m) out[k] = eval::summarize(v);
  return out;
}

struct MethodAccumulator {
  std::map<int, std::vector<double>> accent;
  std::map<std::string, std::vector<double>> group;
  std::vector<double> l1;
  std::vector<double> l1_delta;
  std::map<int, std::vector<double>> cosine;

  void add(const SeedTables &t, double backbone_l1) {
    append(accent, t.l2.accent);
    append(group, t.l2.group);
    l1.push_back(t.l1.group.at(eval::kAll));
    l1_delta.push_back(t.l1.group.at(eval::kAll) - backbone_l1);
  }

  eval::MethodMetrics finish() const {
    eval::MethodMetrics m;
    m.l2_accent = summarize_all(accent);
    m.l2_group = summarize_all(group);
    m.l1_wer = eval::summarize(l1);
    m.l1_delta = eval::summarize(l1_delta);
    m.cosine = summarize_all(cosine);
    return m;
  }
};

SeedTables tables_for(const Recognizer &r, const corpus::Corpus &corpus) {
  return {eval::eval_wer(r, corpus, corpus::Split::kL2Test),
          eval::eval_wer(r, corpus, corpus::Split::kL1Test)};
}

}  // namespace

eval::MetricsReport build_report(const Layout &l) {
  return in_stage("report", [&] {
    const ExperimentConfig c = load_config(l.config());
    const corpus::Corpus corpus = corpus::load_corpus(l.corpus());
    if (corpus.config_hash() != corpus_key(c)) {
      throw InvariantViolation("corpus on disk does not match config.json");
    }
    const Backbone backbone = Backbone::load(l.backbone());
    const AccentModule am = AccentModule::load(l.accent_module());
    const std::string backbone_fp = backbone.fingerprint();
    const std::string am_fp = am.fingerprint();

    eval::MetricsReport r;
    r.schema_version = eval::kReportSchemaVersion;
    r.config_hash = config_hash(c);
    r.corpus_hash = corpus.config_hash();
    r.seeds = c.regime_seeds;
    for (const corpus::AccentSpec &a : corpus.accents()) r.groups[a.accent_id] = to_string(corpus.group(a.accent_id));
    for (const corpus::Utterance *u : corpus.split(corpus::Split::kL2Test)) r.l2_test_count[u->accent_id] += 1;
    r.l1_test_count = static_cast<int>(corpus.split(corpus::Split::kL1Test).size());
    r.backbone_l1_dev_wer = mean_wer(backbone, corpus.split(corpus::Split::kL1Dev));
    r.accent_module = eval::accent_quality(backbone, am, corpus);
    r.isolation = eval::isolation_report(backbone, am, corpus, c.seed);

    const Recognizer plain(backbone);
    const SeedTables base = tables_for(plain, corpus);
    const double base_l1 = base.l1.group.at(eval::kAll);
    const eval::CosineMethod base_method{"backbone", &plain};
    const eval::CosineTable base_cos =
        eval::cosine_report(backbone, am, std::span(&base_method, 1), corpus);

    std::map<std::string, MethodAccumulator> acc;
    for (std::size_t k = 0; k < c.regime_seeds.size(); ++k) {
      acc["backbone"].add(base, base_l1);
      append(acc["backbone"].cosine, base_cos.similarity.at("backbone"));
    }

    r.parameters.backbone = backbone.parameter_count();
    r.parameters.cap = c.prompt.param_cap;
    for (std::uint64_t seed : c.regime_seeds) {
      std::vector<RunCheckpoint> runs;
      for (Regime regime : {Regime::kFinetune, Regime::kPromptCtc, Regime::kIntapt}) {
        const fs::path dir = l.run(regime, seed);
        RunCheckpoint ck = RunCheckpoint::load(dir);
        const Recognizer rec = ck.recognizer(backbone);
        acc[to_string(regime)].add(tables_for(rec, corpus), base_l1);

        eval::RunSummary s;
        s.regime = to_string(regime);
        s.seed = seed;
        s.dir = fs::relative(dir, l.dir).string();
        s.selected_epoch = ck.selected_epoch;
        s.steps = ck.steps;
        s.trainable_parameters = ck.trainable_parameters;
        s.backbone_unchanged = ck.fingerprints.backbone_start == backbone_fp &&
                               ck.fingerprints.backbone_end == backbone_fp;
        s.am_unchanged = !uses_prompt(regime) || (ck.fingerprints.am_start == am_fp &&
                                                  ck.fingerprints.am_end == am_fp);
        r.runs.push_back(s);
        if (ck.generator) r.parameters.prompt_generator = ck.generator->parameter_count();
        if (ck.critic) r.parameters.critic = nn::count_parameters(nn::as_const(ck.critic->parameters()));
        runs.push_back(std::move(ck));
      }
      const Recognizer prompt_ctc = runs[1].recognizer(backbone);
      const Recognizer intapt = runs[2].recognizer(backbone);
      const eval::CosineMethod methods[] = {{"prompt_ctc", &prompt_ctc}, {"intapt", &intapt}};
      const eval::CosineTable cos = eval::cosine_report(backbone, am, methods, corpus);
      append(acc["prompt_ctc"].cosine, cos.similarity.at("prompt_ctc"));
      append(acc["intapt"].cosine, cos.similarity.at("intapt"));
    }
    r.parameters.ratio = static_cast<double>(r.parameters.prompt_generator) /
                         static_cast<double>(r.parameters.backbone);
    for (const auto &[name, a] : acc) r.methods[name] = a.finish();
    eval::validate_report(eval::to_json(r));
    return r;
  });
}

void write_report(const eval::MetricsReport &r, const Layout &l) {
  in_stage("report", [&] {
    const fs::path dir = l.report_dir();
    fs::create_directories(dir);
    const nlohmann::json j = eval::to_json(r);
    eval::validate_report(j);
    write_json(dir / "report.json", j);
    {
      std::ofstream os(dir / "tables.txt");
      os << eval::format_tables(r);
    }
    {
      std::ofstream os(dir / "wer.csv");
      os << "method,column,mean,std\n";
      for (const auto &[name, m] : r.methods) {
        for (const auto &[a, s] : m.l2_accent) {
          os << name << ',' << r.groups.at(a) << a << ',' << s.mean << ',' << s.std.value_or(0.0) << '\n';
        }
        for (const auto &[g, s] : m.l2_group) {
          os << name << ',' << g << ',' << s.mean << ',' << s.std.value_or(0.0) << '\n';
        }
        os << name << ",L1," << m.l1_wer.mean << ',' << m.l1_wer.std.value_or(0.0) << '\n';
      }
    }
    {
      std::ofstream os(dir / "cosine.csv");
      os << "method,accent,group,mean,std\n";
      for (const auto &[name, m] : r.methods) {
        for (const auto &[a, s] : m.cosine) {
          os << name << ',' << a << ',' << r.groups.at(a) << ',' << s.mean << ','
             << s.std.value_or(0.0) << '\n';
        }
      }
    }
    {
      std::ofstream os(dir / "isolation.csv");
      os << "x,y,accent,group,nuisance\n";
      for (Eigen::Index i = 0; i < r.isolation.projection.rows(); ++i) {
        const int a = r.isolation.accent[static_cast<std::size_t>(i)];
        os << r.isolation.projection(i, 0) << ',' << r.isolation.projection(i, 1) << ',' << a << ','
           << r.groups.at(a) << ',' << r.isolation.nuisance[static_cast<std::size_t>(i)] << '\n';
      }
    }
    return 0;
  });
}

eval::MetricsReport run_experiment(const ExperimentConfig &config, const Layout &l) {
  ExperimentConfig c = config;
  validate(c);
  save_config(l.config(), c);
  const corpus::Corpus corpus = gen_data(c, l);
  const Backbone backbone = pretrain_stage(c, l, corpus);
  const AccentModule am = train_am_stage(c, l, corpus, backbone);
  for (std::uint64_t seed : c.regime_seeds) {
    for (Regime regime : {Regime::kFinetune, Regime::kPromptCtc, Regime::kIntapt}) {
      train_stage(c, l, regime, seed, corpus, backbone, am);
    }
  }
  eval::MetricsReport r = build_report(l);
  write_report(r, l);
  return r;
}

}  // namespace intapt::pipeline
