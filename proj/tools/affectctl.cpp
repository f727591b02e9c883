#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "affect/architectures.hpp"
#include "affect/bench.hpp"
#include "affect/data.hpp"
#include "affect/metrics.hpp"
#include "affect/model_io.hpp"
#include "affect/recommender.hpp"
#include "affect/service.hpp"
#include "affect/training.hpp"

namespace fs = std::filesystem;
using namespace affect;

namespace {

struct TrainArgs {
  std::string arch = "arch3-mobilenet";
  std::string head = "emotion";
  std::string manifest, val_manifest, init, log;
  std::string out = "model.afwt";
  std::size_t epochs = 24, batch = 16;
  std::uint64_t seed = 0;
  double lr = 1e-3;
  bool no_augment = false, weighted = false;
};

struct EvalArgs {
  std::string model, manifest;
  bool json = false;
};

struct PredictArgs {
  std::string emotion_model, va_model, image, bbox;
};

struct BenchArgs {
  std::string model, image, bbox;
  std::size_t runs = 10;
  bool json = false;
};

struct InspectArgs {
  std::string model, arch, head = "emotion";
};

struct ServeArgs {
  std::string emotion_model, va_model, ratings = "ratings.jsonl", static_dir, host = "0.0.0.0", provider;
  int port = 0;
};

struct MockArgs {
  std::string host = "127.0.0.1", token;
  int port = 8089;
  std::uint64_t seed = 7;
};

data::Task task_for(arch::Head h) {
  return h == arch::Head::Emotion ? data::Task::Classification : data::Task::Regression;
}

std::optional<data::BBox> bbox_arg(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return service::parse_bbox(s);
}

void print_warnings(const data::DatasetManifest& m, const std::string& what) {
  std::cerr << what << ": " << m.samples.size() << " samples (" << m.rows_read << " rows, " << m.dropped()
            << " dropped)\n";
  for (const auto& w : m.warnings) std::cerr << "warning: " << w << "\n";
}

int cmd_train(const TrainArgs& a) {
  const auto head = arch::parse_head(a.head);
  arch::AffectModel model = [&] {
    if (a.init.empty()) return arch::build(arch::parse_arch(a.arch), head, a.seed);
    auto m = io::load(a.init);
    if (arch::parse_arch(a.arch) != m.graph.arch) {
      throw std::invalid_argument("--arch " + a.arch + " conflicts with --init model " +
                                  std::string(arch::to_string(m.graph.arch)));
    }
    return m.graph.head == head ? m : arch::swap_head(m, head, a.seed);
  }();

  training::TrainConfig cfg;
  cfg.batch_size = a.batch;
  cfg.epochs = a.epochs;
  cfg.seed = a.seed;
  cfg.loss = training::default_loss(head);
  cfg.augment = !a.no_augment;
  cfg.adam.alpha = a.lr;

  std::vector<training::LabeledImage> train_set, val_set;
  if (a.epochs > 0) {
    const auto m = data::load_manifest(a.manifest, task_for(head));
    print_warnings(m, "train");
    if (a.weighted) {
      const auto st = data::dataset_stats(m);
      cfg.class_weights = training::class_weights(std::span(st.counts.data(), arch::kNumEmotions));
    }
    train_set = data::load_all(m);
    if (!a.val_manifest.empty()) {
      const auto v = data::load_manifest(a.val_manifest, task_for(head));
      print_warnings(v, "validation");
      val_set = data::load_all(v);
    }
  }

  const auto log = a.epochs == 0 ? training::TrainLog{}
                                 : training::train(model, train_set, val_set, cfg,
                                                   [](const training::EpochRecord& r, const arch::AffectModel&) {
                                                     std::cerr << "epoch " << r.epoch << " train_loss "
                                                               << r.train_loss;
                                                     if (!std::isnan(r.val_loss)) std::cerr << " val_loss " << r.val_loss;
                                                     for (const auto& [k, v] : r.metrics) std::cerr << " " << k << " " << v;
                                                     std::cerr << "\n";
                                                     return true;
                                                   });
  const std::size_t bytes = io::save(model, a.out);
  const std::string log_path = a.log.empty() ? a.out + ".log.jsonl" : a.log;
  std::ofstream(log_path, std::ios::trunc) << log.to_jsonl();
  std::cout << "saved " << a.out << " (" << bytes << " bytes), log " << log_path << " (" << log.epochs.size()
            << " epochs)\n";
  return 0;
}

void print_row(const std::string& name, double v) {
  std::cout << std::left << std::setw(8) << name << std::right << std::fixed << std::setprecision(3);
  if (std::isnan(v)) {
    std::cout << std::setw(5) << "n/a" << "\n";
  } else {
    std::cout << v << "\n";
  }
}

int cmd_eval(const EvalArgs& a) {
  const auto model = io::load(a.model);
  const auto m = data::load_manifest(a.manifest, task_for(model.graph.head));
  print_warnings(m, "eval");
  const auto set = data::load_all(m);
  if (set.empty()) throw std::invalid_argument("eval: manifest has no usable samples");
  const Tensor pred = training::predict_all(model, set);

  if (model.graph.head == arch::Head::Emotion) {
    std::vector<int> truth;
    for (const auto& s : set) truth.push_back(s.emotion);
    const auto r = metrics::classification_report(truth, pred);
    if (a.json) {
      std::cout << metrics::to_json(r).dump(2) << "\n";
      return 0;
    }
    std::cout << "Metric  " << arch::to_string(model.graph.arch) << "\n";
    print_row("ACC", r.acc);
    print_row("F1", r.f1);
    print_row("KAPPA", r.kappa);
    print_row("ALPHA", r.alpha);
    print_row("AUCPR", r.aucpr);
    print_row("AUC", r.auc);
    if (r.kappa_degenerate) std::cout << "note: kappa undefined (chance agreement 1), reported as 0\n";
    if (!r.auc_skipped.empty()) std::cout << "note: " << r.auc_skipped.size() << " classes skipped in AUC\n";
  } else {
    std::vector<double> v, ar;
    for (const auto& s : set) {
      v.push_back(s.valence);
      ar.push_back(s.arousal);
    }
    const auto r = metrics::regression_report(pred, v, ar);
    if (a.json) {
      std::cout << metrics::to_json(r).dump(2) << "\n";
      return 0;
    }
    std::cout << "Metric   Valence  Arousal\n" << std::fixed << std::setprecision(3);
    const std::pair<const char*, double metrics::DimensionReport::*> rows[] = {
        {"RMSE", &metrics::DimensionReport::rmse},
        {"CORR", &metrics::DimensionReport::corr},
        {"SAGR", &metrics::DimensionReport::sagr},
        {"CCC", &metrics::DimensionReport::ccc}};
    for (const auto& [name, field] : rows) {
      std::cout << std::left << std::setw(8) << name << std::right << std::setw(8) << r.valence.*field
                << std::setw(9) << r.arousal.*field << "\n";
    }
  }
  return 0;
}

int cmd_predict(const PredictArgs& a) {
  const auto em = io::load(a.emotion_model);
  const auto va = io::load(a.va_model);
  const auto r = service::predict_affect(em, va, image::read_file(a.image), bbox_arg(a.bbox));
  std::cout << r.to_json().dump(2) << "\n";
  return 0;
}

int cmd_bench(const BenchArgs& a) {
  const auto model = io::load(a.model);
  const Tensor input = data::preprocess(image::read_file(a.image), bbox_arg(a.bbox));
  const auto r = bench::run(model, input, a.runs);
  std::cout << (a.json ? r.to_json() + "\n" : r.to_text());
  return 0;
}

int cmd_inspect(const InspectArgs& a) {
  if (!a.model.empty()) {
    std::cout << io::format_model_info(io::model_info(a.model));
    return 0;
  }
  const auto model = arch::build(arch::parse_arch(a.arch), arch::parse_head(a.head));
  const auto report = arch::param_report(model);
  const auto shapes = model.block_output_shapes();
  std::cout << std::left << std::setw(6) << "Block" << std::setw(22) << "Layer" << std::setw(16) << "Output"
            << "Params\n";
  for (std::size_t i = 0; i < report.blocks.size(); ++i) {
    const auto& b = report.blocks[i];
    std::cout << std::setw(6) << b.block << std::setw(22) << b.description << std::setw(16)
              << shape_to_string(shapes[i]) << b.params << "\n";
  }
  std::cout << "total params: " << report.total_params << " (trainable " << report.trainable_params << ")\n"
            << "f32 file size: " << report.serialized_bytes_f32 << " bytes ("
            << std::setprecision(2) << std::fixed << double(report.serialized_bytes_f32) / 1e6 << " MB)\n";
  return 0;
}

int cmd_serve(const ServeArgs& a) {
  service::ServiceConfig c;
  if (!a.emotion_model.empty()) c.emotion_model = a.emotion_model;
  if (!a.va_model.empty()) c.va_model = a.va_model;
  if (!a.static_dir.empty()) c.static_dir = a.static_dir;
  c.ratings_path = a.ratings;
  c.host = a.host;
  c.port = a.port;
  if (c.port == 0) {
    const char* env = std::getenv("PORT");
    c.port = env && *env ? std::stoi(env) : 8080;
  }
  c.provider = rec::ProviderConfig::from_env();
  if (!a.provider.empty()) c.provider.base_url = a.provider;
  c.genres = rec::genre_map_from_env();

  service::AffectService svc(std::move(c));
  if (!svc.ready()) std::cerr << "warning: both --emotion-model and --va-model are needed for /v1/predict\n";
  svc.start();
  std::cerr << "listening on " << a.host << ":" << svc.port() << "\n";
  svc.run();
  return 0;
}

int cmd_mock(const MockArgs& a) {
  rec::MockProvider mock({a.seed, 256, a.token, a.host, a.port});
  mock.start();
  std::cerr << "mock provider on " << mock.base_url() << "\n";
  mock.run();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Facial affect recognition and music recommendation toolkit"};
  app.require_subcommand(1);
  const std::vector<std::string> archs = {"arch1-alexnet", "arch2-vggnet", "arch3-mobilenet"};
  const std::vector<std::string> heads = {"emotion", "va"};

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model from a CSV manifest");
  train->add_option("--arch", ta.arch, "Architecture id")->check(CLI::IsMember(archs));
  train->add_option("--head", ta.head, "Output head")->check(CLI::IsMember(heads));
  train->add_option("--manifest", ta.manifest, "Training manifest CSV")->required()->check(CLI::ExistingFile);
  train->add_option("--val-manifest", ta.val_manifest, "Validation manifest CSV")->check(CLI::ExistingFile);
  train->add_option("--epochs", ta.epochs, "Epochs (0 saves the initial weights)");
  train->add_option("--batch", ta.batch, "Batch size")->check(CLI::PositiveNumber);
  train->add_option("--seed", ta.seed, "Random seed");
  train->add_option("--lr", ta.lr, "Adam step size")->check(CLI::PositiveNumber);
  train->add_option("--out", ta.out, "Output weight file");
  train->add_option("--log", ta.log, "Training log path (default <out>.log.jsonl)");
  train->add_option("--init", ta.init, "Start from this weight file (head is swapped if needed)")
      ->check(CLI::ExistingFile);
  train->add_flag("--no-augment", ta.no_augment, "Disable flip/rotation/translation augmentation");
  train->add_flag("--class-weights", ta.weighted, "Weight the loss by inverse class frequency");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Evaluate a model on a manifest");
  eval->add_option("--model", ea.model)->required()->check(CLI::ExistingFile);
  eval->add_option("--manifest", ea.manifest)->required()->check(CLI::ExistingFile);
  eval->add_flag("--json", ea.json, "Emit JSON");

  PredictArgs pa;
  auto* predict = app.add_subcommand("predict", "Predict emotion, valence and arousal for one image");
  predict->add_option("--emotion-model", pa.emotion_model)->required()->check(CLI::ExistingFile);
  predict->add_option("--va-model", pa.va_model)->required()->check(CLI::ExistingFile);
  predict->add_option("--image", pa.image)->required()->check(CLI::ExistingFile);
  predict->add_option("--bbox", pa.bbox, "Face box x,y,w,h");

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "Time single-image inference");
  bench->add_option("--model", ba.model)->required()->check(CLI::ExistingFile);
  bench->add_option("--image", ba.image)->required()->check(CLI::ExistingFile);
  bench->add_option("--runs", ba.runs)->check(CLI::PositiveNumber);
  bench->add_option("--bbox", ba.bbox, "Face box x,y,w,h");
  bench->add_flag("--json", ba.json, "Emit JSON");

  InspectArgs ia;
  auto* inspect = app.add_subcommand("inspect", "Describe a weight file or an architecture");
  auto* model_opt = inspect->add_option("--model", ia.model)->check(CLI::ExistingFile);
  auto* arch_opt = inspect->add_option("--arch", ia.arch)->check(CLI::IsMember(archs));
  inspect->add_option("--head", ia.head)->check(CLI::IsMember(heads));
  model_opt->excludes(arch_opt);

  ServeArgs sa;
  auto* serve = app.add_subcommand("serve", "Run the HTTP service");
  serve->add_option("--emotion-model", sa.emotion_model)->check(CLI::ExistingFile);
  serve->add_option("--va-model", sa.va_model)->check(CLI::ExistingFile);
  serve->add_option("--ratings", sa.ratings, "Ratings JSON-lines file");
  serve->add_option("--static", sa.static_dir, "Directory served under /app")->check(CLI::ExistingDirectory);
  serve->add_option("--host", sa.host);
  serve->add_option("--port", sa.port, "Port (default $PORT or 8080)");
  serve->add_option("--provider", sa.provider, "Recommendation provider base URL");

  MockArgs ma;
  auto* mock = app.add_subcommand("mock-provider", "Run the offline recommendation provider");
  mock->add_option("--host", ma.host);
  mock->add_option("--port", ma.port);
  mock->add_option("--seed", ma.seed);
  mock->add_option("--token", ma.token, "Require this bearer token");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      if (ta.epochs > 0 && ta.manifest.empty()) throw std::invalid_argument("train: --manifest is required");
      if (ta.weighted && ta.head != "emotion") throw std::invalid_argument("--class-weights applies to --head emotion only");
      return cmd_train(ta);
    }
    if (*eval) return cmd_eval(ea);
    if (*predict) return cmd_predict(pa);
    if (*bench) return cmd_bench(ba);
    if (*inspect) {
      if (ia.model.empty() && ia.arch.empty()) throw std::invalid_argument("inspect: give --model or --arch");
      return cmd_inspect(ia);
    }
    if (*serve) return cmd_serve(sa);
    if (*mock) return cmd_mock(ma);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
