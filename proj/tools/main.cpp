#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "transpose/explain.hpp"
#include "transpose/io.hpp"
#include "transpose/model.hpp"
#include "transpose/synth.hpp"
#include "transpose/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace transpose;

namespace {

std::pair<int, int> parse_size(const std::string& text) {
  const auto pos = text.find('x');
  if (pos == std::string::npos) {
    throw std::invalid_argument("size must look like HxW, got '" + text + "'");
  }
  return {std::stoi(text.substr(0, pos)), std::stoi(text.substr(pos + 1))};
}

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return json::parse(in);
}

// --set a.b=value, applied after the file parse; values are JSON literals
// when they parse as such, raw strings otherwise.
void apply_overrides(json& config, const std::vector<std::string>& sets) {
  for (const std::string& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    }
    const std::string key = kv.substr(0, eq);
    const std::string raw = kv.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::parse_error&) {
      value = raw;
    }
    json* node = &config;
    size_t start = 0;
    for (;;) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
      if (part.empty()) throw std::invalid_argument("bad --set key '" + key + "'");
      if (dot == std::string::npos) {
        (*node)[part] = value;
        break;
      }
      node = &(*node)[part];
      start = dot + 1;
    }
  }
}

ModelConfig model_config_from(const json& j) {
  if (j.contains("model")) return ModelConfig::from_json(j["model"].dump());
  return ModelConfig::from_json(j.dump());
}

void write_keypoints_json(const KeypointSet& kps, const std::string& path) {
  json out;
  json arr = json::array();
  for (size_t k = 0; k < kps.size(); ++k) {
    arr.push_back({{"k", k},
                   {"x", kps[k].x},
                   {"y", kps[k].y},
                   {"score", kps[k].score},
                   {"visible", kps[k].visible}});
  }
  out["keypoints"] = arr;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << out.dump(2) << "\n";
}

int run_gen(int n, uint64_t seed, const std::string& out, const std::string& size,
            double occlusion_p) {
  const auto [h, w] = parse_size(size);
  auto samples = make_dataset(n, seed, h, w, occlusion_p);
  export_dataset(samples, seed, occlusion_p, out);
  std::printf("wrote %d samples (%dx%d) to %s\n", n, h, w, out.c_str());
  return 0;
}

int run_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, const std::vector<std::string>& sets) {
  json cfg = load_json_file(config_path);
  apply_overrides(cfg, sets);
  if (!cfg.contains("model") || !cfg.contains("train")) {
    throw std::invalid_argument("train config needs 'model' and 'train' sections");
  }
  const ModelConfig mc = ModelConfig::from_json(cfg["model"].dump());
  const TrainConfig tc = TrainConfig::from_json(cfg["train"].dump());
  auto dataset = import_dataset(data_dir);
  fs::create_directories(out_dir);
  const std::string model_path = out_dir + "/model.tpse";
  auto [model, report] = train(mc, tc, dataset, model_path);
  report.write_json(out_dir + "/report.json");
  report.write_csv(out_dir + "/curves.csv");
  std::printf("trained %d epochs, final test PCK@%g = %.4f (%.1fs)\n", tc.epochs,
              tc.pck_alpha, report.final_pck(), report.wall_seconds);
  std::printf("model: %s\n", model_path.c_str());
  return 0;
}

int run_infer(const std::string& model_path, const std::string& image_path,
              const std::string& out_dir) {
  Model model = load_model(model_path);
  Tensor image = read_ppm(image_path);
  ForwardResult result = forward(model, image, false);
  fs::create_directories(out_dir);
  const KeypointSet kps = decode(result.heatmaps);
  write_keypoints_json(kps, out_dir + "/keypoints.json");
  const int hm_h = result.heatmaps.dim(1), hm_w = result.heatmaps.dim(2);
  for (int k = 0; k < result.heatmaps.dim(0); ++k) {
    char name[64];
    std::snprintf(name, sizeof(name), "/heatmap_%02d.pgm", k);
    write_pgm_map(out_dir + name,
                  result.heatmaps.value().data() + static_cast<int64_t>(k) * hm_h * hm_w,
                  hm_h, hm_w);
  }
  std::printf("wrote %zu keypoints and %d heatmaps to %s\n", kps.size(),
              result.heatmaps.dim(0), out_dir.c_str());
  return 0;
}

int run_explain(const std::string& model_path, const std::string& image_path,
                int keypoint, int layer, double delta, const std::string& mode,
                int token, const std::string& out_dir) {
  Model model = load_model(model_path);
  Tensor image = read_ppm(image_path);
  ForwardResult result = forward(model, image, true);
  const int grid_h = image.dim(1) / model.config.r;
  const int grid_w = image.dim(2) / model.config.r;
  const int last = static_cast<int>(result.records.size()) - 1;
  if (layer < 0) layer = last;
  if (layer > last) throw std::invalid_argument("layer " + std::to_string(layer) +
                                                " outside [0, " + std::to_string(last) + "]");
  const KeypointSet kps = decode(result.heatmaps);
  const int query = query_index_for_keypoint(model, kps, keypoint, grid_h, grid_w);
  fs::create_directories(out_dir);

  if (mode == "dependency" || mode == "affected") {
    DependencyReport report =
        mode == "dependency"
            ? dependency_area(result.records[static_cast<size_t>(layer)], query, delta,
                              grid_h, grid_w)
            : affected_area(result.records[static_cast<size_t>(layer)], query, delta,
                            grid_h, grid_w);
    report.keypoint_index = keypoint;
    export_report(report, out_dir + "/report.csv", ReportFormat::Csv);
    export_report(report, out_dir + "/report.pgm", ReportFormat::Pgm);
    export_report(report, out_dir + "/report.json", ReportFormat::Json);
    std::printf("%s area of keypoint %d (query %d, layer %d, delta %g): %zu positions\n",
                mode.c_str(), keypoint, query, layer, delta, report.area.size());
    return 0;
  }
  if (mode == "strict-grad" || mode == "empirical-grad") {
    int j = token;
    if (j < 0) {  // strongest attended position other than the query itself
      const Tensor& attn = result.records.back().matrix;
      double best = -1.0;
      for (int c = 0; c < attn.dim(1); ++c) {
        if (c == query) continue;
        if (attn(query, c) > best) {
          best = attn(query, c);
          j = c;
        }
      }
    }
    const LinearityReport report = grad_linearity_check(
        model, image, query, j,
        mode == "strict-grad" ? LinearityMode::Strict : LinearityMode::Empirical);
    export_report(report, out_dir + "/report.json");
    if (report.mode == LinearityMode::Strict) {
      std::printf("strict linearity at (i=%d, j=%d): max rel err %.3g\n", query, j,
                  report.max_rel_err);
    } else {
      std::printf("empirical linearity at i=%d: correlation %.4f over %zu positions\n",
                  query, report.correlation, report.grad_norms.size());
    }
    return 0;
  }
  throw std::invalid_argument("unknown explain mode '" + mode + "'");
}

int run_count_params(const std::string& config_path, const std::vector<std::string>& sets) {
  json cfg = load_json_file(config_path);
  apply_overrides(cfg, sets);
  const ModelConfig mc = model_config_from(cfg);
  const Model model = build_model(mc, 0);
  const ParamCount count = count_params(model);
  std::printf("backbone     %12lld\n", static_cast<long long>(count.backbone));
  std::printf("encoder      %12lld\n", static_cast<long long>(count.encoder));
  std::printf("head         %12lld\n", static_cast<long long>(count.head));
  std::printf("pe trainable %12lld\n", static_cast<long long>(count.pe_trainable));
  std::printf("pe stored    %12lld\n", static_cast<long long>(count.pe_stored));
  std::printf("trainable    %12lld\n", static_cast<long long>(count.trainable()));
  std::printf("total        %12lld\n", static_cast<long long>(count.total()));
  return 0;
}

int run_pe_analyze(const std::string& model_path, const std::string& out_dir) {
  Model model = load_model(model_path);
  if (model.pe.kind == PeKind::None) {
    throw std::invalid_argument("model has no position embedding to analyze");
  }
  fs::create_directories(out_dir);
  const Tensor sim = pe_cosine_similarity(model.pe);
  const int gh = model.pe.source_h, gw = model.pe.source_w;
  const int len = gh * gw;
  {
    std::FILE* f = std::fopen((out_dir + "/pe_similarity.csv").c_str(), "w");
    if (!f) throw std::runtime_error("cannot write pe_similarity.csv");
    const double* s = sim.value().data();
    for (int i = 0; i < len; ++i) {
      for (int j = 0; j < len; ++j) {
        std::fprintf(f, j ? ",%.17g" : "%.17g", s[static_cast<int64_t>(i) * len + j]);
      }
      std::fputc('\n', f);
    }
    std::fclose(f);
  }
  // one tile per grid position, each tile the similarity map of that position
  Tensor tiles = Tensor::zeros({gh * gh, gw * gw});
  for (int qy = 0; qy < gh; ++qy) {
    for (int qx = 0; qx < gw; ++qx) {
      const int q = qy * gw + qx;
      for (int y = 0; y < gh; ++y) {
        for (int x = 0; x < gw; ++x) {
          // similarity is in [-1,1]; shift to [0,1] for the image
          tiles(qy * gh + y, qx * gw + x) = 0.5 * (sim(q, y * gw + x) + 1.0);
        }
      }
    }
  }
  write_pgm_map(out_dir + "/pe_similarity_grid.pgm", tiles.value().data(), gh * gh, gw * gw);
  write_pe_csv(model.pe, out_dir + "/pe_table.csv");
  std::printf("wrote PE similarity (%dx%d grid) to %s\n", gh, gw, out_dir.c_str());
  return 0;
}

int run_eval_res(const std::string& model_path, const std::string& resolutions,
                 const std::string& out_dir, int n, uint64_t seed, double occlusion_p,
                 double alpha) {
  Model model = load_model(model_path);
  std::vector<std::pair<int, int>> res;
  size_t start = 0;
  while (start < resolutions.size()) {
    size_t comma = resolutions.find(',', start);
    if (comma == std::string::npos) comma = resolutions.size();
    res.push_back(parse_size(resolutions.substr(start, comma - start)));
    start = comma + 1;
  }
  if (res.empty()) throw std::invalid_argument("no resolutions given");
  DatasetSpec spec;
  spec.n = n;
  spec.seed = seed;
  spec.occlusion_p = occlusion_p;
  const auto table = eval_resolutions(model, spec, res, alpha);
  fs::create_directories(out_dir);
  std::FILE* f = std::fopen((out_dir + "/pck_by_resolution.csv").c_str(), "w");
  if (!f) throw std::runtime_error("cannot write pck_by_resolution.csv");
  std::fprintf(f, "height,width,pck\n");
  for (const auto& row : table) {
    std::fprintf(f, "%d,%d,%.17g\n", row.height, row.width, row.pck);
    std::printf("%dx%d: PCK@%g = %.4f\n", row.height, row.width, alpha, row.pck);
  }
  std::fclose(f);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TransPose: keypoint localization via a transformer encoder, with "
               "attention-based explainability tooling"};
  app.require_subcommand(1);
  app.footer("TRANSPOSE_THREADS caps the worker pool (default: available cores).");

  // gen
  auto* gen = app.add_subcommand("gen", "generate a synthetic figure dataset");
  int gen_n = 100;
  uint64_t gen_seed = 7;
  std::string gen_out, gen_size = "64x48";
  double gen_occ = 0.1;
  gen->add_option("--n", gen_n, "sample count")->capture_default_str();
  gen->add_option("--seed", gen_seed, "dataset seed")->capture_default_str();
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--size", gen_size, "image extents HxW")->capture_default_str();
  gen->add_option("--occlusion-p", gen_occ, "per-sample occlusion probability")
      ->capture_default_str();

  // train
  auto* tr = app.add_subcommand("train", "train a model on a generated dataset");
  std::string tr_config, tr_data, tr_out;
  std::vector<std::string> tr_sets;
  tr->add_option("--config", tr_config, "JSON config with 'model' and 'train' sections")
      ->required();
  tr->add_option("--data", tr_data, "dataset directory from 'gen'")->required();
  tr->add_option("--out", tr_out, "output directory")->required();
  tr->add_option("--set", tr_sets, "override config keys, e.g. --set train.epochs=5");

  // infer
  auto* inf = app.add_subcommand("infer", "run a model on one image");
  std::string inf_model, inf_image, inf_out;
  inf->add_option("--model", inf_model, "model file")->required();
  inf->add_option("--image", inf_image, "PPM image")->required();
  inf->add_option("--out", inf_out, "output directory")->required();

  // explain
  auto* ex = app.add_subcommand("explain", "attention and gradient reports");
  std::string ex_model, ex_image, ex_mode = "dependency", ex_out;
  int ex_keypoint = 0, ex_layer = -1, ex_token = -1;
  double ex_delta = 0.00075;
  ex->add_option("--model", ex_model, "model file")->required();
  ex->add_option("--image", ex_image, "PPM image")->required();
  ex->add_option("--keypoint", ex_keypoint, "keypoint index")->capture_default_str();
  ex->add_option("--layer", ex_layer, "attention layer (-1 = last)")->capture_default_str();
  ex->add_option("--delta", ex_delta, "attention threshold")->capture_default_str();
  ex->add_option("--mode", ex_mode, "dependency|affected|strict-grad|empirical-grad")
      ->capture_default_str();
  ex->add_option("--token", ex_token, "token index j for grad modes (-1 = strongest)")
      ->capture_default_str();
  ex->add_option("--out", ex_out, "output directory")->required();

  // count-params
  auto* cp = app.add_subcommand("count-params", "itemized parameter count for a config");
  std::string cp_config;
  std::vector<std::string> cp_sets;
  cp->add_option("--config", cp_config, "model config JSON (or full train config)")
      ->required();
  cp->add_option("--set", cp_sets, "override config keys");

  // pe-analyze
  auto* pa = app.add_subcommand("pe-analyze", "position embedding cosine similarity");
  std::string pa_model, pa_out;
  pa->add_option("--model", pa_model, "model file")->required();
  pa->add_option("--out", pa_out, "output directory")->required();

  // eval-res
  auto* er = app.add_subcommand("eval-res", "PCK across input resolutions");
  std::string er_model, er_res, er_out;
  int er_n = 2200;
  uint64_t er_seed = 7;
  double er_occ = 0.1, er_alpha = 0.05;
  er->add_option("--model", er_model, "model file")->required();
  er->add_option("--resolutions", er_res, "comma list, e.g. 64x48,128x96")->required();
  er->add_option("--out", er_out, "output directory")->required();
  er->add_option("--n", er_n, "dataset size whose test split is regenerated")
      ->capture_default_str();
  er->add_option("--seed", er_seed, "dataset seed")->capture_default_str();
  er->add_option("--occlusion-p", er_occ, "occlusion probability")->capture_default_str();
  er->add_option("--alpha", er_alpha, "PCK threshold fraction")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "error: " << e.what() << "\n";
    std::cerr << app.help() << "\n";
    return 2;
  }

  try {
    if (*gen) return run_gen(gen_n, gen_seed, gen_out, gen_size, gen_occ);
    if (*tr) return run_train(tr_config, tr_data, tr_out, tr_sets);
    if (*inf) return run_infer(inf_model, inf_image, inf_out);
    if (*ex) return run_explain(ex_model, ex_image, ex_keypoint, ex_layer, ex_delta,
                                ex_mode, ex_token, ex_out);
    if (*cp) return run_count_params(cp_config, cp_sets);
    if (*pa) return run_pe_analyze(pa_model, pa_out);
    if (*er) return run_eval_res(er_model, er_res, er_out, er_n, er_seed, er_occ, er_alpha);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
