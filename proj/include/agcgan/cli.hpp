#pragma once

// Command-line front end.
//
//   agcgan [--seed N] [--config FILE] [--out DIR] [--threads N] <command> [flags]
//
// Settings resolve as defaults < config file < flags. The config file is a
// JSON object with optional sections "data" (synthetic dataset), "train"
// (training, model, pretraining) and "eval". Every command writes
// resolved_config_<command>.json into --out. Failures print one line
//   error: <kind>: <message>
// to stderr and exit with the kind's code.

#include <Eigen/Core>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "agcgan/evaluation.hpp"
#include "agcgan/runtime.hpp"
#include "json.hpp"

namespace agc::cli {

enum class ErrorKind { kUsage, kMissingFile, kMismatch, kConfig, kFormat, kNumeric, kRuntime };

inline const char* kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::kUsage: return "usage";
    case ErrorKind::kMissingFile: return "missing-file";
    case ErrorKind::kMismatch: return "mismatch";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kRuntime: return "runtime";
  }
  return "runtime";
}

inline int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::kUsage: return 2;
    case ErrorKind::kMissingFile: return 3;
    case ErrorKind::kMismatch: return 4;
    case ErrorKind::kConfig: return 5;
    case ErrorKind::kFormat: return 6;
    case ErrorKind::kNumeric: return 7;
    case ErrorKind::kRuntime: return 1;
  }
  return 1;
}

struct EvalSettings {
  std::size_t gallery_samples = 1;
  std::string match = "pixel";
  bool scenarios = false;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalSettings, gallery_samples, match, scenarios)

struct Settings {
  data::SyntheticParams data;
  train::TrainConfig train;
  EvalSettings eval;
  std::size_t threads = 1;
};

inline nlohmann::json to_json_settings(const Settings& s) {
  return {{"data", s.data}, {"train", s.train}, {"eval", s.eval}, {"threads", s.threads}};
}

inline Settings settings_from_file(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw train::ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw train::ConfigError("config file '" + path.string() + "' must hold a JSON object");
  train::check_known_keys(j, nlohmann::json{{"data", data::SyntheticParams{}},
                                            {"train", train::TrainConfig{}},
                                            {"eval", EvalSettings{}}});
  Settings s;
  try {
    if (j.contains("data")) s.data = j.at("data").get<data::SyntheticParams>();
    if (j.contains("eval")) s.eval = j.at("eval").get<EvalSettings>();
  } catch (const nlohmann::json::exception& e) {
    throw train::ConfigError("config file '" + path.string() + "': " + e.what());
  }
  if (j.contains("train")) s.train = train::config_from_json(j.at("train"));
  return s;
}

// Flag values live here until parsing finishes; only flags that were given
// override the resolved settings.
struct Flags {
  std::uint64_t seed = 0;
  std::string config, out = "out";
  std::size_t threads = Settings{}.threads;
  std::size_t identities = data::SyntheticParams{}.identities;
  std::size_t per_id = data::SyntheticParams{}.samples_per_identity;
  std::size_t size = data::SyntheticParams{}.height;
  double degradation = data::SyntheticParams{}.degradation;
  double variation = data::SyntheticParams{}.variation;
  std::string data_path, checkpoint, attr;
  std::string ablation = train::TrainConfig{}.ablation;
  std::string match = EvalSettings{}.match;
  std::size_t steps = train::TrainConfig{}.steps;
  std::size_t checkpoint_every = train::TrainConfig{}.checkpoint_every;
  std::size_t base_width = train::TrainConfig{}.model.base_width;
  std::size_t gallery_samples = EvalSettings{}.gallery_samples;
  bool scenarios = false, finetune_polar = false;
};

class Runner {
 public:
  Runner(std::ostream& out, std::ostream& log) : out_(out), log_(log) {}

  int run(int argc, const char* const* argv) {
    CLI::App app{"Attribute-guided coupled GAN for polarimetric-to-visible face matching", "agcgan"};
    build(app);
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
      out_ << app.help("", CLI::AppFormatMode::All);
      return 0;
    } catch (const CLI::CallForAllHelp&) {
      out_ << app.help("", CLI::AppFormatMode::All);
      return 0;
    } catch (const CLI::ParseError& e) {
      return fail(ErrorKind::kUsage, e.what());
    }
    if (app.get_subcommands().empty()) return fail(ErrorKind::kUsage, "no command given (try --help)");
    return guarded([&] { execute(*app.get_subcommands().front()); });
  }

 private:
  std::ostream& out_;
  std::ostream& log_;
  Flags f_;
  Settings s_;
  std::map<std::string, CLI::Option*> opts_;

  int fail(ErrorKind k, const std::string& msg) {
    std::string line = msg;
    std::replace(line.begin(), line.end(), '\n', ' ');
    log_ << "error: " << kind_name(k) << ": " << line << "\n";
    return exit_code(k);
  }

  template <typename F>
  int guarded(F&& f) {
    try {
      f();
      return 0;
    } catch (const io::MissingFileError& e) {
      return fail(ErrorKind::kMissingFile, e.what());
    } catch (const io::MismatchError& e) {
      return fail(ErrorKind::kMismatch, e.what());
    } catch (const ShapeError& e) {
      return fail(ErrorKind::kMismatch, e.what());
    } catch (const train::ConfigError& e) {
      return fail(ErrorKind::kConfig, e.what());
    } catch (const io::FormatError& e) {
      return fail(ErrorKind::kFormat, e.what());
    } catch (const NumericError& e) {
      return fail(ErrorKind::kNumeric, e.what());
    } catch (const std::exception& e) {
      return fail(ErrorKind::kRuntime, e.what());
    }
  }

  CLI::Option* keep(const std::string& key, CLI::Option* o) {
    opts_[key] = o;
    return o;
  }

  bool given(const std::string& key) const {
    const auto it = opts_.find(key);
    return it != opts_.end() && it->second->count() > 0;
  }

  void build(CLI::App& app) {
    app.require_subcommand(0, 1);
    app.option_defaults()->always_capture_default();
    keep("seed", app.add_option("--seed", f_.seed, "Root seed for every random stream"));
    keep("config", app.add_option("--config", f_.config, "JSON config file (sections: data, train, eval)"));
    keep("out", app.add_option("--out", f_.out, "Output directory"));
    keep("threads", app.add_option("--threads", f_.threads, "Upper bound on internal parallelism")
                        ->check(CLI::PositiveNumber));

    auto* gen = app.add_subcommand("gen-data", "Generate the synthetic paired dataset");
    keep("identities", gen->add_option("--identities", f_.identities, "Number of identities"));
    keep("per_id", gen->add_option("--per-id", f_.per_id, "Samples per identity"));
    keep("size", gen->add_option("--size", f_.size, "Image height and width (power of 2, >= 32)"));
    keep("degradation", gen->add_option("--degradation", f_.degradation, "Extra polar blur and noise level"));
    keep("variation", gen->add_option("--variation", f_.variation, "Per-sample variation scale"));

    auto* pre = app.add_subcommand("pretrain-attr", "Pretrain the attribute predictor A on visible images");
    keep("pre_size", pre->add_option("--size", f_.size, "Image height and width"));
    keep("finetune_polar", pre->add_flag("--finetune-polar", f_.finetune_polar,
                                         "Also write a copy of A fine-tuned on polar images"));

    auto* tr = app.add_subcommand("train", "Train the coupled model");
    keep("data", tr->add_option("--data", f_.data_path, "Dataset file written by gen-data")->required());
    keep("ablation", tr->add_option("--ablation", f_.ablation, "Loss preset")
                         ->check(CLI::IsMember({"full", "no-attr", "cpl-e"})));
    keep("steps", tr->add_option("--steps", f_.steps, "Training steps"));
    keep("base_width", tr->add_option("--base-width", f_.base_width, "Generator and discriminator base width"));
    keep("checkpoint_every", tr->add_option("--checkpoint-every", f_.checkpoint_every,
                                            "Steps between checkpoints (0: final only)"));
    keep("attr", tr->add_option("--attr", f_.attr, "Pretrained attribute predictor checkpoint"));

    auto* ev = app.add_subcommand("eval", "Identification, verification and attribute metrics");
    keep("ev_checkpoint", ev->add_option("--checkpoint", f_.checkpoint, "Coupled-model checkpoint")->required());
    keep("ev_data", ev->add_option("--data", f_.data_path, "Dataset file")->required());
    keep("gallery_samples", ev->add_option("--gallery-samples", f_.gallery_samples,
                                           "Gallery images per test identity (0: all samples)"));
    keep("match", ev->add_option("--match", f_.match, "Matching space")->check(CLI::IsMember({"pixel", "embedding"})));
    keep("scenarios", ev->add_flag("--scenarios", f_.scenarios, "Also run the four attribute scenarios"));
    keep("ev_attr", ev->add_option("--attr", f_.attr, "Attribute predictor checkpoint for the scenarios"));

    auto* pa = app.add_subcommand("predict-attrs", "Attribute probabilities for the polar test images");
    keep("pa_checkpoint", pa->add_option("--checkpoint", f_.checkpoint, "Coupled-model checkpoint (Pol-GAN heads)"));
    keep("pa_attr", pa->add_option("--attr", f_.attr, "Attribute predictor checkpoint (used instead of the heads)"));
    keep("pa_data", pa->add_option("--data", f_.data_path, "Dataset file")->required());

    auto* ee = app.add_subcommand("export-embeddings", "Write visible and polar embeddings of the test split");
    keep("ee_checkpoint", ee->add_option("--checkpoint", f_.checkpoint, "Coupled-model checkpoint")->required());
    keep("ee_data", ee->add_option("--data", f_.data_path, "Dataset file")->required());
  }

  void resolve(const std::string& command) {
    if (given("config")) s_ = settings_from_file(f_.config);
    if (given("seed")) {
      s_.data.seed = f_.seed;
      s_.train.seed = f_.seed;
    }
    if (given("threads")) s_.threads = f_.threads;
    if (given("identities")) s_.data.identities = f_.identities;
    if (given("per_id")) s_.data.samples_per_identity = f_.per_id;
    if (given("size") || given("pre_size")) s_.data.height = s_.data.width = f_.size;
    if (given("degradation")) s_.data.degradation = f_.degradation;
    if (given("variation")) s_.data.variation = f_.variation;
    if (given("ablation")) s_.train.ablation = f_.ablation;
    if (given("steps")) s_.train.steps = f_.steps;
    if (given("base_width")) s_.train.model.base_width = s_.train.model.disc_base_width = f_.base_width;
    if (given("checkpoint_every")) s_.train.checkpoint_every = f_.checkpoint_every;
    if (given("gallery_samples")) s_.eval.gallery_samples = f_.gallery_samples;
    if (given("match")) s_.eval.match = f_.match;
    if (given("scenarios")) s_.eval.scenarios = f_.scenarios;
    try {
      s_.data.validate();
    } catch (const std::invalid_argument& e) {
      throw train::ConfigError(e.what());
    }
    s_.train.validate();
    if (s_.eval.match != "pixel" && s_.eval.match != "embedding") {
      throw train::ConfigError("eval.match must be pixel or embedding, got '" + s_.eval.match + "'");
    }
    Eigen::setNbThreads(static_cast<int>(s_.threads));
    std::filesystem::create_directories(out_dir());
    nlohmann::json snap = to_json_settings(s_);
    snap["command"] = command;
    io::write_text_atomic(out_dir() / ("resolved_config_" + command + ".json"), snap.dump(2) + "\n");
  }

  std::filesystem::path out_dir() const { return f_.out; }

  void report(const std::filesystem::path& p) { out_ << p.string() << "\n"; }

  void execute(const CLI::App& cmd) {
    const std::string name = cmd.get_name();
    resolve(name);
    if (name == "gen-data") return gen_data();
    if (name == "pretrain-attr") return pretrain_attr();
    if (name == "train") return train_cmd();
    if (name == "eval") return eval_cmd();
    if (name == "predict-attrs") return predict_attrs();
    if (name == "export-embeddings") return export_embeddings();
  }

  void gen_data() {
    const auto ds = data::generate_synthetic_dataset(s_.data);
    const auto path = out_dir() / "dataset.agcd";
    data::save_dataset(path, ds);
    report(path);
    report(data::manifest_path(path));
  }

  void pretrain_attr() {
    auto result = train::pretrain_attribute_predictor<float>(s_.train, s_.data.height);
    log_ << "held-out mean accuracy " << train::format_number(result.report.mean_accuracy) << "\n";
    const auto report_json = train::to_json_report(result.report);
    const auto path = out_dir() / "attr_predictor.agck";
    io::save_checkpoint(path, train::predictor_checkpoint(result.predictor, s_.train.seed, report_json));
    io::write_text_atomic(out_dir() / "attr_report.json", report_json.dump(2) + "\n");
    report(path);
    report(out_dir() / "attr_report.json");
    if (f_.finetune_polar) {
      const auto polar = eval::finetune_polar_predictor(result.predictor, s_.train);
      const auto ppath = out_dir() / "attr_predictor_polar.agck";
      io::save_checkpoint(ppath, train::predictor_checkpoint(polar, s_.train.seed));
      report(ppath);
    }
  }

  std::optional<nn::AttributePredictor<float>> load_predictor(std::size_t image_size) const {
    if (f_.attr.empty()) return std::nullopt;
    auto a = train::predictor_from_checkpoint<float>(io::load_checkpoint(f_.attr));
    if (a.config().input_size != image_size) {
      throw io::MismatchError("attribute predictor '" + f_.attr + "' expects " +
                              std::to_string(a.config().input_size) + "px images, dataset has " +
                              std::to_string(image_size) + "px");
    }
    return a;
  }

  train::TrainState<float> load_state(const data::Dataset& ds) const {
    auto state = train::from_checkpoint<float>(io::load_checkpoint(f_.checkpoint));
    if (state.image_size != ds.manifest.height || state.image_size != ds.manifest.width) {
      throw io::MismatchError("checkpoint '" + f_.checkpoint + "' expects " + std::to_string(state.image_size) +
                              "px images, dataset '" + f_.data_path + "' has " +
                              std::to_string(ds.manifest.height) + "x" + std::to_string(ds.manifest.width));
    }
    return state;
  }

  void train_cmd() {
    const auto ds = data::load_dataset(f_.data_path);
    const auto a = load_predictor(ds.manifest.height);
    const auto run = train::train<float>(ds, s_.train, a ? &*a : nullptr, {out_dir(), &log_});
    const std::string tag = train::run_tag(run.state.step, s_.train.seed);
    report(out_dir() / ("checkpoint_" + tag + ".agck"));
    report(out_dir() / ("losses_" + tag + ".csv"));
    if (run.pretrain) {
      const auto path = out_dir() / ("attr_report_" + tag + ".json");
      io::write_text_atomic(path, train::to_json_report(*run.pretrain).dump(2) + "\n");
      report(path);
    }
  }

  void eval_cmd() {
    const auto ds = data::load_dataset(f_.data_path);
    const auto state = load_state(ds);
    const auto a = load_predictor(ds.manifest.height);
    eval::EvalOptions opts;
    opts.gallery_samples = s_.eval.gallery_samples;
    opts.space = s_.eval.match == "embedding" ? eval::MatchSpace::kEmbedding : eval::MatchSpace::kPixel;
    opts.scenarios = s_.eval.scenarios;
    auto r = eval::evaluate(state, ds, opts, a ? &*a : nullptr);
    r.checkpoint = std::filesystem::path(f_.checkpoint).filename().string();
    for (const auto& p : eval::write_report(r, out_dir())) report(p);
  }

  void predict_attrs() {
    if (f_.checkpoint.empty() == f_.attr.empty()) {
      throw train::ConfigError("predict-attrs needs exactly one of --checkpoint or --attr");
    }
    const auto ds = data::load_dataset(f_.data_path);
    const auto test = data::index_split(ds, ds.manifest.test_identities).all_samples;
    std::vector<std::vector<float>> polar;
    std::vector<std::array<double, data::kAttributeCount>> probs;
    std::string source;
    std::uint64_t step = 0, seed = s_.train.seed;
    if (!f_.checkpoint.empty()) {
      const auto state = load_state(ds);
      const auto p = data::prepare(ds, state.config.preprocess);
      for (auto s : test) polar.push_back(p.polar[s]);
      probs = eval::synthesize_probes(state.model.pol_gen, polar, p.height, p.width).attribute_probs;
      source = "polgan_heads";
      step = state.step;
      seed = state.config.seed;
    } else {
      const auto a = *load_predictor(ds.manifest.height);
      const auto p = data::prepare(ds, s_.train.preprocess);
      for (auto s : test) polar.push_back(p.polar[s]);
      if (a.config().in_channels == 1) polar = eval::first_channel(polar, p.height * p.width);
      if (a.config().in_channels != 1 && a.config().in_channels != data::kPolarChannels) {
        throw io::MismatchError("attribute predictor '" + f_.attr + "' takes " +
                                std::to_string(a.config().in_channels) + " channels, expected 1 or 3");
      }
      probs = eval::predictor_probs(a, polar, p.height);
      source = a.config().in_channels == 1 ? "predictor_S0" : "predictor_polar";
    }
    std::string csv = "sample,identity,source";
    for (const auto* n : data::kAttributeNames) csv += std::string(",") + n;
    csv += "\n";
    for (std::size_t i = 0; i < test.size(); ++i) {
      csv += std::to_string(test[i]) + "," + std::to_string(ds.samples[test[i]].identity) + "," + source;
      for (double v : probs[i]) csv += "," + train::format_number(v);
      csv += "\n";
    }
    const auto path = out_dir() / ("attr_probs_" + train::run_tag(step, seed) + ".csv");
    io::write_text_atomic(path, csv);
    report(path);
  }

  void export_embeddings() {
    const auto ds = data::load_dataset(f_.data_path);
    const auto state = load_state(ds);
    const auto p = data::prepare(ds, state.config.preprocess);
    const auto rows = eval::embed_test_split(state.model, ds, p);
    const auto path = out_dir() / ("embeddings_" + train::run_tag(state.step, state.config.seed) + ".csv");
    io::write_text_atomic(path, eval::embeddings_csv(rows));
    report(path);
  }
};

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& log = std::cerr) {
  configure_allocator();
  return Runner(out, log).run(argc, argv);
}

}  // namespace agc::cli
