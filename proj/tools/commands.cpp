#include "commands.hpp"

#include <CLI11.hpp>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "emma/checkpoint.hpp"
#include "emma/ensemble.hpp"
#include "emma/gradcheck.hpp"
#include "emma/metrics.hpp"
#include "emma/phantom.hpp"
#include "emma/toy_demo.hpp"
#include "emma/training.hpp"

namespace emma::cli {

namespace {

struct Globals {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  int precision = 32;

  Precision prec() const { return precision == 64 ? Precision::f64 : Precision::f32; }
};

class CheckFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp);
    if (!f) throw IoError("cannot open '" + tmp.string() + "' for writing");
    f << text;
    if (!f) throw IoError("failed writing '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

Extents3 parse_extents(const std::vector<std::size_t>& v, const char* flag) {
  if (v.size() == 1) return Extents3::cube(v[0]);
  if (v.size() == 3) return {v[0], v[1], v[2]};
  throw UsageError(std::string(flag) + " takes one or three extents");
}

// Reference labels from either a label volume or a labelled case image.
LabelTensor load_reference(const std::filesystem::path& p, Spacing& spacing) {
  VolumeFile v = read_volume(p);
  spacing = v.spacing;
  if (auto* u = std::get_if<Tensor<std::uint8_t>>(&v.data); u && u->dim(0) == 1) {
    return u->reshaped({u->dim(1), u->dim(2), u->dim(3)});
  }
  return read_case(p, true).labels;
}

template <typename T>
Tensor<double> predict_with(const std::filesystem::path& ckpt, const VolumeCase& raw, const TilingOptions& tiling) {
  const Network<T> net = load_checkpoint<T>(ckpt);
  const VolumeCase normalized = normalize_case(raw, normalization_from_metadata(net.metadata));
  return predict_full_volume(net, normalized.images, tiling);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Heterogeneous 3D CNN ensemble toolkit for brain-tumour segmentation", "emma"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads (ensemble members run concurrently)")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_option("--precision", g.precision, "Floating-point precision")->check(CLI::IsMember({32, 64}))->capture_default_str();

  // phantom
  auto* phantom = app.add_subcommand("phantom", "Generate synthetic labelled cases");
  std::string ph_dir;
  std::size_t ph_count = 1, ph_start = 0;
  std::vector<std::size_t> ph_extents{64};
  bool ph_field = false;
  double ph_noise = 8.0;
  phantom->add_option("--out-dir", ph_dir, "Output directory")->required();
  phantom->add_option("--count", ph_count, "Number of cases")->capture_default_str();
  phantom->add_option("--start-index", ph_start, "Index of the first case")->capture_default_str();
  phantom->add_option("--extents", ph_extents, "D H W, or one value for a cube")->expected(1, 3);
  phantom->add_flag("--bias-field", ph_field, "Apply a smooth multiplicative field");
  phantom->add_option("--noise-sd", ph_noise, "Gaussian noise standard deviation")->capture_default_str();

  // normalize
  auto* normalize = app.add_subcommand("normalize", "Normalize a case");
  std::string nm_case, nm_out, nm_version = "v1_zscore", nm_bias = "polynomial", nm_landmarks, nm_ckpt;
  std::vector<std::string> nm_train;
  int nm_degree = kDefaultBiasDegree;
  normalize->add_option("--case", nm_case, "Input case (.vol)")->required();
  normalize->add_option("--out", nm_out, "Output case (.vol)")->required();
  normalize->add_option("--version", nm_version, "v1_zscore | v2_bfc_zscore | v3_bfc_pwl_zscore")->capture_default_str();
  normalize->add_option("--bias-mode", nm_bias, "external | polynomial | none")->capture_default_str();
  normalize->add_option("--bias-degree", nm_degree, "Polynomial degree (2 or 3)")->capture_default_str();
  normalize->add_option("--landmarks", nm_landmarks, "Landmark model JSON (v3)");
  normalize->add_option("--train-cases", nm_train, "Cases to train landmarks on (v3)");
  normalize->add_option("--checkpoint", nm_ckpt, "Take the normalization from a checkpoint instead");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train one network from a JSON run config");
  std::string tr_config;
  bool tr_quiet = false;
  train_cmd->add_option("config", tr_config, "Run config (JSON)")->required();
  train_cmd->add_flag("--quiet", tr_quiet, "Suppress progress output");

  // predict
  auto* predict = app.add_subcommand("predict", "Predict a confidence map with one checkpoint");
  std::string pr_ckpt, pr_case, pr_out, pr_labels;
  std::vector<std::size_t> pr_tile;
  predict->add_option("--checkpoint", pr_ckpt, "Checkpoint")->required();
  predict->add_option("--case", pr_case, "Raw case (.vol)")->required();
  predict->add_option("--out", pr_out, "Confidence map output (.vol)")->required();
  predict->add_option("--labels-out", pr_labels, "Label volume output (.vol)");
  predict->add_option("--tile", pr_tile, "Output tile extents")->expected(1, 3);

  // ensemble
  auto* ensemble = app.add_subcommand("ensemble", "Average the members of a manifest");
  std::string en_manifest, en_case, en_out, en_labels;
  std::vector<std::size_t> en_tile;
  ensemble->add_option("--manifest", en_manifest, "Manifest (JSON array)")->required();
  ensemble->add_option("--case", en_case, "Raw case (.vol)")->required();
  ensemble->add_option("--out", en_out, "Averaged confidence map (.vol)")->required();
  ensemble->add_option("--labels-out", en_labels, "Label volume output (.vol)");
  ensemble->add_option("--tile", en_tile, "Output tile extents")->expected(1, 3);

  // evaluate
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Score a segmentation against a reference");
  std::string ev_pred, ev_ref, ev_out, ev_conf;
  evaluate_cmd->add_option("--pred", ev_pred, "Predicted label volume (.vol)")->required();
  evaluate_cmd->add_option("--ref", ev_ref, "Reference labels (.vol) or labelled case")->required();
  evaluate_cmd->add_option("--confidence", ev_conf, "Confidence map for diagnostics");
  evaluate_cmd->add_option("--out", ev_out, "Report JSON output");

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  std::string gc_scope = "all";
  GradcheckOptions gc_opts;
  gradcheck->add_option("scope", gc_scope, "ops | losses | network | all")->capture_default_str();
  gradcheck->add_option("--instances", gc_opts.instances, "Random instances per check")->capture_default_str();
  gradcheck->add_option("--tolerance", gc_opts.tolerance, "Relative error tolerance")->capture_default_str();

  // toy-demo
  auto* toy = app.add_subcommand("toy-demo", "1-D ensemble of single-unit classifiers");
  std::string toy_out;
  toy->add_option("--out", toy_out, "Report JSON output");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "emma: error[usage]: " << msg << '\n';
    return 2;
  }

  try {
    if (phantom->parsed()) {
      PhantomOptions opts;
      opts.extents = parse_extents(ph_extents, "--extents");
      opts.bias_field = ph_field;
      opts.noise_sd = ph_noise;
      for (std::size_t i = 0; i < ph_count; ++i) {
        VolumeCase c = phantom_case(g.seed, ph_start + i, opts);
        std::ostringstream name;
        name << "case_" << std::setw(3) << std::setfill('0') << ph_start + i << ".vol";
        const auto path = std::filesystem::path(ph_dir) / name.str();
        write_case(path, c);
        out << path.string() << '\n';
      }
    } else if (normalize->parsed()) {
      const VolumeCase raw = read_case(nm_case);
      NormalizationSpec spec;
      if (!nm_ckpt.empty()) {
        spec = normalization_from_metadata(read_checkpoint_info(nm_ckpt).metadata);
      } else {
        spec.version = parse_normalization(nm_version);
        spec.bias_mode = parse_bias_mode(nm_bias);
        spec.bias_degree = nm_degree;
        if (!nm_landmarks.empty()) {
          std::ifstream f(nm_landmarks);
          if (!f) throw IoError("cannot open landmark model '" + nm_landmarks + "'");
          std::stringstream ss;
          ss << f.rdbuf();
          spec.landmarks = LandmarkModel::from_json(ss.str());
        } else if (!nm_train.empty()) {
          std::vector<VolumeCase> train_cases;
          for (const auto& p : nm_train) train_cases.push_back(read_case(p));
          spec = fit_normalization(train_cases, spec);
        }
      }
      VolumeCase n = normalize_case(raw, spec);
      write_case(nm_out, n);
      if (spec.landmarks) write_text(std::filesystem::path(nm_out).replace_extension(".landmarks.json"), spec.landmarks->to_json());
      out << nm_out << '\n';
    } else if (train_cmd->parsed()) {
      RunConfig config = RunConfig::load(tr_config);
      if (app.get_option("--seed")->count() > 0) config.seed = g.seed;
      const TrainResult r = train_from_config(config, g.prec(), tr_quiet ? nullptr : &out);
      out << "checkpoint " << r.checkpoint.string() << " (" << r.log.size() << " iterations, final loss "
          << r.log.back().loss << ")\n";
    } else if (predict->parsed()) {
      TilingOptions tiling;
      if (!pr_tile.empty()) tiling.tile = parse_extents(pr_tile, "--tile");
      const VolumeCase raw = read_case(pr_case);
      const Tensor<double> map = g.prec() == Precision::f32 ? predict_with<float>(pr_ckpt, raw, tiling)
                                                            : predict_with<double>(pr_ckpt, raw, tiling);
      write_confidence(pr_out, map, raw.spacing);
      if (!pr_labels.empty()) write_labels(pr_labels, argmax_segment(map), raw.spacing);
      out << pr_out << '\n';
    } else if (ensemble->parsed()) {
      TilingOptions tiling;
      if (!en_tile.empty()) tiling.tile = parse_extents(en_tile, "--tile");
      const VolumeCase raw = read_case(en_case);
      const EmmaResult r = run_emma(EnsembleManifest::load(en_manifest), raw, g.prec(), tiling, false, g.threads);
      write_confidence(en_out, r.confidence.probs, raw.spacing);
      if (!en_labels.empty()) write_labels(en_labels, r.labels, raw.spacing);
      out << en_out << '\n';
    } else if (evaluate_cmd->parsed()) {
      Spacing spacing;
      const LabelTensor ref = load_reference(ev_ref, spacing);
      const LabelTensor pred = read_labels(ev_pred);
      Tensor<double> conf;
      if (!ev_conf.empty()) conf = read_confidence(ev_conf);
      const EvaluationReport report =
          evaluate(pred, ref, spacing, ev_conf.empty() ? nullptr : &conf, std::filesystem::path(ev_pred).stem().string());
      out << report.to_table();
      if (!ev_out.empty()) write_text(ev_out, report.to_json());
    } else if (gradcheck->parsed()) {
      gc_opts.seed = g.seed;
      std::size_t failing = 0;
      for (const auto& r : run_gradcheck(gc_scope, gc_opts)) {
        out << std::left << std::setw(26) << r.name << (r.failures ? "FAIL" : "ok  ") << "  instances " << r.instances
            << "  failures " << r.failures << "  max_rel_error " << std::scientific << std::setprecision(3)
            << r.max_error << std::defaultfloat << '\n';
        failing += r.failures ? 1 : 0;
      }
      out << failing << " failing checks\n";
      if (failing) throw CheckFailed(std::to_string(failing) + " gradient checks failed");
    } else if (toy->parsed()) {
      const ToyOptions opts;
      const ToyReport r = toy_demo(g.seed, opts);
      out << r.to_text();
      if (!toy_out.empty()) write_text(toy_out, r.to_json());
      if (!(std::abs(r.average_crossing) < opts.center)) {
        throw CheckFailed("averaged posterior does not cross 0.5 between the cluster centres");
      }
    }
  } catch (const CheckFailed& e) {
    err << "emma: error[check]: " << e.what() << '\n';
    return 3;
  } catch (const Error& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "emma: error[" << e.kind() << "]: " << msg << '\n';
    return e.kind() == std::string("usage") ? 2 : 1;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "emma: error[io]: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "emma: error[internal]: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace emma::cli
