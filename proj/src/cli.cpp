#include "vqa/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "json.hpp"
#include "vqa/artifacts.hpp"
#include "vqa/attribution.hpp"
#include "vqa/checkpoint.hpp"
#include "vqa/encoding.hpp"
#include "vqa/evaluation.hpp"
#include "vqa/model.hpp"
#include "vqa/synth_data.hpp"

namespace vqa::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::string data;
  std::string val;
  std::string ckpt;
  std::string out;
  std::string in;
  std::uint64_t seed = 42;
  std::size_t count = 0;
  std::size_t epochs = 20;
  float lr = 0.1f;
  std::size_t batch = 32;
  std::string method = "all";
  std::string methods = "all";
  std::string patch;
  std::string word_norm = "l2";
  std::string seed_target = "prob";
};

void require_file(const std::string& path, const char* what) {
  if (!fs::is_regular_file(path)) {
    throw ValidationError(std::string(what) + " not found: " + path);
  }
}

void require_parent(const std::string& path) {
  const fs::path parent = fs::absolute(path).parent_path();
  if (!fs::is_directory(parent)) {
    throw ValidationError("output directory does not exist: " + parent.string());
  }
}

void prepare_out_dir(const std::string& dir) {
  if (fs::exists(dir) && !fs::is_directory(dir)) {
    throw ValidationError("output path exists and is not a directory: " + dir);
  }
  require_parent(fs::path(dir).lexically_normal().string());
  fs::create_directories(dir);
}

std::vector<Method> parse_methods(const std::string& list) {
  if (list == "all") return {std::begin(kAllMethods), std::end(kAllMethods)};
  std::vector<Method> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      const Method m = parse_method(item);
      if (std::find(out.begin(), out.end(), m) == out.end()) out.push_back(m);
    } catch (const std::invalid_argument&) {
      throw ValidationError("unknown method '" + item + "' (expected guided, occlusion, random, all)");
    }
  }
  if (out.empty()) throw ValidationError("no methods given");
  return out;
}

std::optional<std::array<float, 3>> parse_patch(const std::string& text) {
  if (text.empty()) return std::nullopt;
  if (text == "imagenet") {
    return std::array<float, 3>{123.68f / 255.0f, 116.779f / 255.0f, 103.939f / 255.0f};
  }
  std::array<float, 3> v{};
  std::stringstream ss(text);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i == 3) throw ValidationError("--patch takes exactly three values");
    try {
      std::size_t used = 0;
      v[i] = std::stof(item, &used);
      if (used != item.size() || !std::isfinite(v[i])) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ValidationError("--patch value '" + item + "' is not a finite number");
    }
    ++i;
  }
  if (i != 3) throw ValidationError("--patch takes exactly three values");
  return v;
}

EvalOptions eval_options(const RunConfig& cfg, const VqaModel& model) {
  EvalOptions opts;
  opts.seed = cfg.seed;
  opts.occlusion = OcclusionConfig::for_model(model);
  if (auto p = parse_patch(cfg.patch)) opts.occlusion.patch_value = *p;
  if (cfg.word_norm == "l2") {
    opts.guided.word_norm = WordNorm::L2;
  } else if (cfg.word_norm == "linf") {
    opts.guided.word_norm = WordNorm::LInf;
  } else {
    throw ValidationError("--word-norm must be l2 or linf");
  }
  if (cfg.seed_target == "prob") {
    opts.guided.seed = SeedTarget::Probability;
  } else if (cfg.seed_target == "logit") {
    opts.guided.seed = SeedTarget::Logit;
  } else {
    throw ValidationError("--seed-target must be prob or logit");
  }
  return opts;
}

void check_compatible(const VqaModel& model, const Dataset& data) {
  if (model.vocab_size != data.vocab.words.size() ||
      model.answer_count != data.vocab.answers.size()) {
    throw ValidationError("checkpoint/dataset vocabulary mismatch: checkpoint has " +
                          std::to_string(model.vocab_size) + " words and " +
                          std::to_string(model.answer_count) + " answers, dataset has " +
                          std::to_string(data.vocab.words.size()) + " and " +
                          std::to_string(data.vocab.answers.size()));
  }
}

Dataset load_data(const std::string& path) {
  try {
    return read_dataset(path);
  } catch (const DatasetError& e) {
    throw ValidationError(e.what());
  }
}

VqaModel load_model(const std::string& path) {
  try {
    return load_checkpoint(path);
  } catch (const CheckpointError& e) {
    throw ValidationError(e.what());
  }
}

json config_json(const std::string& sub, const RunConfig& cfg) {
  json j{{"subcommand", sub}, {"seed", cfg.seed}};
  auto put = [&](const char* k, const std::string& v) {
    if (!v.empty()) j[k] = v;
  };
  put("data", cfg.data);
  put("val", cfg.val);
  put("ckpt", cfg.ckpt);
  put("out", cfg.out);
  if (sub == "gen-data") j["count"] = cfg.count;
  if (sub == "train") {
    j["epochs"] = cfg.epochs;
    j["lr"] = cfg.lr;
    j["batch"] = cfg.batch;
  }
  if (sub == "attribute") j["method"] = cfg.method;
  if (sub == "evaluate") j["methods"] = cfg.methods;
  if (sub == "attribute" || sub == "evaluate") {
    put("patch", cfg.patch);
    j["word_norm"] = cfg.word_norm;
    j["seed_target"] = cfg.seed_target;
  }
  return j;
}

/// Records config, input checksums and artifact checksums (names relative to
/// the manifest's directory).
void write_manifest(const fs::path& manifest_path, const json& config,
                    const std::vector<std::string>& inputs,
                    const std::vector<fs::path>& artifacts) {
  json j;
  j["config"] = config;
  j["inputs"] = json::object();
  for (const auto& in : inputs) j["inputs"][in] = encoding::sha256_file(in);
  j["artifacts"] = json::object();
  const fs::path base = manifest_path.parent_path();
  for (const auto& a : artifacts) {
    j["artifacts"][fs::relative(a, base).generic_string()] = encoding::sha256_file(a);
  }
  encoding::write_file(manifest_path, j.dump(2) + "\n");
}

// ------------------------------------------------------------ subcommands

int cmd_gen_data(const RunConfig& cfg, std::ostream& out) {
  if (cfg.count == 0) throw ValidationError("--count must be positive");
  require_parent(cfg.out);
  const Dataset data = generate_dataset(cfg.count, cfg.seed);
  write_dataset(data, cfg.out);
  write_manifest(cfg.out + ".run-manifest.json", config_json("gen-data", cfg), {}, {cfg.out});
  out << "wrote " << data.examples.size() << " examples to " << cfg.out << "\n";
  return kExitOk;
}

std::vector<LabeledInput> labeled(const std::vector<VqaExample>& examples, std::size_t begin,
                                  std::size_t end) {
  std::vector<LabeledInput> out;
  for (std::size_t i = begin; i < end; ++i) {
    out.push_back({&examples[i].image, examples[i].question, examples[i].answer});
  }
  return out;
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  require_file(cfg.data, "dataset");
  if (!cfg.val.empty()) require_file(cfg.val, "validation dataset");
  require_parent(cfg.out);
  if (!(cfg.lr > 0.0f)) throw ValidationError("--lr must be positive");
  if (cfg.batch == 0) throw ValidationError("--batch must be positive");
  if (cfg.epochs == 0) throw ValidationError("--epochs must be positive");

  const Dataset data = load_data(cfg.data);
  if (data.examples.empty()) throw ValidationError("dataset is empty: " + cfg.data);
  std::optional<Dataset> val;
  if (!cfg.val.empty()) {
    val = load_data(cfg.val);
    if (!(val->vocab == data.vocab)) throw ValidationError("validation vocabulary differs from training");
  }
  // Without --val the last tenth of the data is held out.
  std::size_t train_end = data.examples.size();
  if (!val && data.examples.size() >= 10) train_end -= data.examples.size() / 10;
  const auto train_set = labeled(data.examples, 0, train_end);
  const auto heldout = val ? labeled(val->examples, 0, val->examples.size())
                           : labeled(data.examples, train_end, data.examples.size());

  VqaModel model = VqaModel::initialize(data.vocab.words.size(), data.vocab.answers.size(), cfg.seed);
  std::vector<const Tensor*> images;
  for (const auto& ex : train_set) images.push_back(ex.image);
  model.patch_value = channel_means(images);

  TrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.learning_rate = cfg.lr;
  tc.batch_size = cfg.batch;
  tc.seed = cfg.seed;
  const TrainLog log = train(model, train_set, heldout, tc, [&](const EpochStats& s) {
    out << "epoch " << s.epoch << " loss " << std::fixed << std::setprecision(4) << s.train_loss
        << " heldout_acc " << s.heldout_accuracy << "\n"
        << std::defaultfloat;
  });

  save_checkpoint(model, cfg.out);
  json jlog = json::array();
  for (const auto& s : log.epochs) {
    jlog.push_back({{"epoch", s.epoch}, {"train_loss", s.train_loss},
                    {"heldout_accuracy", s.heldout_accuracy}});
  }
  const std::string log_path = cfg.out + ".train-log.json";
  encoding::write_file(log_path, json{{"epochs", jlog}, {"train_n", train_set.size()},
                                      {"heldout_n", heldout.size()}}
                                     .dump(2) + "\n");
  std::vector<std::string> inputs{cfg.data};
  if (!cfg.val.empty()) inputs.push_back(cfg.val);
  write_manifest(cfg.out + ".run-manifest.json", config_json("train", cfg), inputs,
                 {cfg.out, log_path});
  return kExitOk;
}

struct ExampleArtifacts {
  std::vector<std::pair<std::string, std::string>> files;  // name, contents
};

int cmd_attribute(const RunConfig& cfg, std::ostream& out) {
  require_file(cfg.ckpt, "checkpoint");
  require_file(cfg.data, "dataset");
  const auto methods = parse_methods(cfg.method);
  const VqaModel model = load_model(cfg.ckpt);
  const Dataset data = load_data(cfg.data);
  check_compatible(model, data);
  const EvalOptions opts = eval_options(cfg, model);
  prepare_out_dir(cfg.out);

  const auto& examples = data.examples;
  std::vector<ExampleArtifacts> results(examples.size());
  const long n = long(examples.size());
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < n; ++i) {
    const auto& ex = examples[std::size_t(i)];
    std::vector<std::string> tokens;
    for (int t : ex.question) tokens.push_back(data.vocab.words[std::size_t(t)]);
    auto& files = results[std::size_t(i)].files;
    for (Method m : methods) {
      const std::string stem = ex.id + "." + std::string(method_name(m));
      ImportanceMap map;
      std::optional<WordImportance> words;
      switch (m) {
        case Method::Guided: {
          auto g = guided_bp_attribute(model, ex.image, ex.question, opts.guided);
          map = std::move(g.pixel_map);
          words = std::move(g.words);
          break;
        }
        case Method::Occlusion:
          map = occlusion_attribute_image(model, ex.image, ex.question, opts.occlusion);
          words = occlusion_attribute_words(model, ex.image, ex.question);
          break;
        case Method::Random:
          map = image_map(Method::Random, model, ex, std::size_t(i), opts);
          break;
      }
      files.emplace_back(stem + ".json", artifacts::map_to_json(map).dump() + "\n");
      files.emplace_back(stem + ".pgm", artifacts::map_to_pgm(map));
      if (words) {
        files.emplace_back(stem + ".words.json",
                           artifacts::words_to_json(*words, tokens).dump() + "\n");
      }
    }
  }

  std::vector<fs::path> written;
  for (const auto& r : results) {
    for (const auto& [name, contents] : r.files) {
      const fs::path p = fs::path(cfg.out) / name;
      encoding::write_file(p, contents);
      written.push_back(p);
    }
  }
  write_manifest(fs::path(cfg.out) / "run-manifest.json", config_json("attribute", cfg),
                 {cfg.ckpt, cfg.data}, written);
  out << "wrote " << written.size() << " files for " << examples.size() << " examples to "
      << cfg.out << "\n";
  return kExitOk;
}

int cmd_evaluate(const RunConfig& cfg, std::ostream& out) {
  require_file(cfg.ckpt, "checkpoint");
  require_file(cfg.data, "dataset");
  const auto methods = parse_methods(cfg.methods);
  const VqaModel model = load_model(cfg.ckpt);
  const Dataset data = load_data(cfg.data);
  check_compatible(model, data);
  if (data.examples.empty()) throw ValidationError("dataset is empty: " + cfg.data);
  const EvalOptions opts = eval_options(cfg, model);
  prepare_out_dir(cfg.out);

  const EvalReport report = evaluate(model, data, methods, opts);
  const fs::path dir(cfg.out);
  std::vector<fs::path> written;
  auto emit = [&](const std::string& name, const std::string& contents) {
    encoding::write_file(dir / name, contents);
    written.push_back(dir / name);
  };
  emit("correlations.csv", artifacts::correlation_csv(report.correlations));
  if (report.occlusion_pos) {
    emit("pos_histogram.csv", artifacts::pos_csv(*report.occlusion_pos));
    emit("pos_histogram.svg",
         artifacts::pos_svg(*report.occlusion_pos, "P(most important word | POS), occlusion"));
  }
  if (report.guided_pos) {
    emit("pos_histogram.guided.csv", artifacts::pos_csv(*report.guided_pos));
    emit("pos_histogram.guided.svg",
         artifacts::pos_svg(*report.guided_pos, "P(most important word | POS), guided backprop"));
  }
  if (report.flip) {
    emit("flip_predictor.json",
         artifacts::flip_to_json(*report.flip, report.flip_train_n, report.flip_eval_n).dump(2) +
             "\n");
  }
  emit("eval_report.json", artifacts::report_to_json(report).dump(2) + "\n");
  write_manifest(dir / "run-manifest.json", config_json("evaluate", cfg), {cfg.ckpt, cfg.data},
                 written);
  out << "evaluated " << report.n_examples << " examples; artifacts in " << cfg.out << "\n";
  return kExitOk;
}

int cmd_report(const RunConfig& cfg, std::ostream& out) {
  const fs::path report_path = fs::path(cfg.in) / "eval_report.json";
  require_file(report_path.string(), "evaluation report");
  json j;
  try {
    j = json::parse(encoding::read_file(report_path));
  } catch (const json::exception& e) {
    throw ValidationError("malformed " + report_path.string() + ": " + e.what());
  }
  out << "examples: " << j.value("n_examples", 0) << "   model accuracy: " << std::fixed
      << std::setprecision(3) << j.value("model_accuracy", 0.0) << "\n\n";
  out << std::left << std::setw(12) << "method" << std::right << std::setw(10) << "mean"
      << std::setw(10) << "se" << std::setw(8) << "n" << std::setw(12) << "degenerate"
      << "\n";
  for (const auto& c : j.value("correlations", json::array())) {
    out << std::left << std::setw(12) << c.at("method").get<std::string>() << std::right
        << std::setw(10) << c.at("mean").get<double>() << std::setw(10)
        << c.at("se").get<double>() << std::setw(8) << c.at("n").get<std::size_t>()
        << std::setw(12) << c.at("degenerate_count").get<std::size_t>() << "\n";
  }
  if (j.contains("pos_histogram")) {
    for (const auto& [method, hist] : j.at("pos_histogram").items()) {
      out << "\nP(most important | POS), " << method << ":\n";
      for (const auto& e : hist.at("entries")) {
        out << "  " << std::left << std::setw(12) << e.at("tag").get<std::string>() << std::right
            << std::setw(8) << e.at("probability").get<double>() << "  ("
            << e.at("most_important").get<std::size_t>() << "/"
            << e.at("occurrences").get<std::size_t>() << ")\n";
      }
    }
    out << "content word on top (correct attribute questions): "
        << j.value("content_word_top_fraction", 0.0) << " of "
        << j.value("attribute_correct", 0) << "\n";
  }
  if (j.contains("flip_predictor")) {
    const auto& f = j.at("flip_predictor");
    out << "\nfailure prediction from flip fraction: accuracy "
        << f.at("eval_accuracy").get<double>() << " vs majority baseline "
        << f.at("baseline_accuracy").get<double>() << " (threshold "
        << f.at("threshold").get<std::string>() << ")\n";
  }
  out << std::defaultfloat;
  return kExitOk;
}

}  // namespace

int run(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attribution maps for a toy visual question answering model", "vqa-attrib"};
  app.require_subcommand(1);
  RunConfig cfg;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic VQA dataset");
  gen->add_option("--count", cfg.count, "Number of examples")->required();
  gen->add_option("--seed", cfg.seed, "RNG seed");
  gen->add_option("--out", cfg.out, "Output JSON-lines file")->required();

  auto* tr = app.add_subcommand("train", "Train a model and write a checkpoint");
  tr->add_option("--data", cfg.data, "Training dataset")->required();
  tr->add_option("--val", cfg.val, "Held-out dataset (default: last tenth of --data)");
  tr->add_option("--out", cfg.out, "Checkpoint path")->required();
  tr->add_option("--epochs", cfg.epochs, "Epochs");
  tr->add_option("--lr", cfg.lr, "Learning rate");
  tr->add_option("--batch", cfg.batch, "Batch size");
  tr->add_option("--seed", cfg.seed, "Initialization and shuffling seed");

  auto add_attr_flags = [&](CLI::App* sub) {
    sub->add_option("--ckpt", cfg.ckpt, "Checkpoint")->required();
    sub->add_option("--data", cfg.data, "Dataset")->required();
    sub->add_option("--out", cfg.out, "Output directory")->required();
    sub->add_option("--seed", cfg.seed, "Seed for random baseline maps");
    sub->add_option("--patch", cfg.patch,
                    "Occlusion patch R,G,B in [0,1] or 'imagenet' (default: training mean)");
    sub->add_option("--word-norm", cfg.word_norm, "Guided word score norm: l2 or linf");
    sub->add_option("--seed-target", cfg.seed_target,
                    "Guided backward seed: prob (predicted probability) or logit");
  };
  auto* attr = app.add_subcommand("attribute", "Write per-example importance maps");
  add_attr_flags(attr);
  attr->add_option("--method", cfg.method, "guided, occlusion, random or all")->required();

  auto* ev = app.add_subcommand("evaluate", "Score importance maps against relevance masks");
  add_attr_flags(ev);
  ev->add_option("--methods", cfg.methods, "Comma-separated methods or all")->required();

  auto* rep = app.add_subcommand("report", "Print a summary of an evaluate output directory");
  rep->add_option("--in", cfg.in, "Evaluate output directory")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(cfg, out);
    if (tr->parsed()) return cmd_train(cfg, out);
    if (attr->parsed()) return cmd_attribute(cfg, out);
    if (ev->parsed()) return cmd_evaluate(cfg, out);
    if (rep->parsed()) return cmd_report(cfg, out);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitValidation;
}

}  // namespace vqa::cli
