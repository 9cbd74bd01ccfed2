// mavfusion: synth | train | fuse | metrics | bench | ablate.
// Exit codes: 0 success, 1 usage error, 2 I/O error, 3 numerical failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <thread>

#include <CLI11.hpp>

#include "mav/media_io.hpp"
#include "mav/metrics.hpp"
#include "mav/pipeline.hpp"
#include "mav/scene_spec_io.hpp"
#include "mav/synth.hpp"

namespace fs = std::filesystem;
using namespace mav;

namespace {

std::string frame_name(const char* prefix, std::size_t t, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%04zu.%s", prefix, t, ext);
  return buf;
}

struct ConfigFlags {
  std::optional<double> tau, gamma, gate_theta, lr;
  std::optional<int> patch, k_max, channels, iters, crop;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant, kv_mode;

  void attach(CLI::App* cmd) {
    cmd->add_option("--tau", tau, "Top-K retention ratio");
    cmd->add_option("--patch", patch, "patch size p");
    cmd->add_option("--k-max", k_max, "selected-patch cap");
    cmd->add_option("--channels", channels, "feature channels C");
    cmd->add_option("--gamma", gamma, "temporal loss weight");
    cmd->add_option("--gate-theta", gate_theta, "motion gate threshold");
    cmd->add_option("--variant", variant,
                    "full|full_db|full_sb|inverted_mask|dense_attention|no_mafm");
    cmd->add_option("--kv-mode", kv_mode, "all_patches|global_token_only");
    cmd->add_option("--seed", seed, "RNG seed");
    cmd->add_option("--lr", lr, "initial learning rate");
    cmd->add_option("--iters", iters, "training iterations");
    cmd->add_option("--crop", crop, "training crop size");
  }

  // Precedence: flags > config file > defaults.
  void apply(FusionConfig& cfg) const {
    if (tau) cfg.tau = *tau;
    if (patch) cfg.patch = *patch;
    if (k_max) cfg.k_max = *k_max;
    if (channels) cfg.channels = *channels;
    if (gamma) cfg.gamma = *gamma;
    if (gate_theta) cfg.gate_theta = *gate_theta;
    if (variant) cfg.variant = variant_from_name(*variant);
    if (kv_mode) cfg.kv_mode = kv_mode_from_name(*kv_mode);
    if (seed) cfg.seed = *seed;
    if (lr) cfg.lr = *lr;
    if (iters) cfg.iters = *iters;
    if (crop) cfg.crop = *crop;
  }
};

FusionConfig resolve_config(const std::string& config_path, const ConfigFlags& flags) {
  FusionConfig cfg = config_path.empty() ? FusionConfig{} : read_config(config_path);
  flags.apply(cfg);
  cfg.validate();
  return cfg;
}

void print_config(const FusionConfig& cfg) {
  std::cout << "# resolved config\n" << format_config(cfg);
}

void write_sequence(const std::string& dir, const char* prefix,
                    const std::vector<Tensor<float>>& frames) {
  ensure_dir(dir);
  for (std::size_t t = 0; t < frames.size(); ++t)
    write_pgm(dir + "/" + frame_name(prefix, t, "pgm"), frames[t]);
}

// Flow directory layout (matches synth output): fwd_%04d.flo is the pair
// (t, t+1) anchored at t, bwd_%04d.flo the pair (t+1, t) anchored at t+1.
SequenceFlows<float> load_flow_dir(const std::string& dir, std::size_t t_count, Index h, Index w) {
  SequenceFlows<float> flows;
  flows.prev.assign(t_count, Tensor<float>(Shape{h, w, 2}));
  flows.next.assign(t_count, Tensor<float>(Shape{h, w, 2}));
  for (std::size_t t = 0; t + 1 < t_count; ++t) {
    flows.next[t] = read_flo(dir + "/" + frame_name("fwd", t, "flo"));
    flows.prev[t + 1] = read_flo(dir + "/" + frame_name("bwd", t, "flo"));
  }
  return flows;
}

int cmd_synth(const std::string& spec_path, const std::string& out_dir) {
  SceneSpec spec = spec_path.empty() ? default_scene() : read_scene_spec(spec_path);
  std::cout << "# scene seed = " << spec.seed << ", " << spec.width << "x" << spec.height << " x "
            << spec.frames << " frames, " << spec.objects.size() << " objects\n";
  SceneData data = generate(spec);
  write_sequence(out_dir + "/ir", "frame", data.ir);
  write_sequence(out_dir + "/vis", "frame", data.vis);
  write_sequence(out_dir + "/mask", "mask", data.gt_mask);
  ensure_dir(out_dir + "/flow");
  for (std::size_t t = 0; t < data.gt_flow_fwd.size(); ++t) {
    write_flo(out_dir + "/flow/" + frame_name("fwd", t, "flo"), data.gt_flow_fwd[t]);
    write_flo(out_dir + "/flow/" + frame_name("bwd", t, "flo"), data.gt_flow_bwd[t]);
  }
  std::cout << "wrote " << data.ir.size() << " frame pairs to " << out_dir << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const ConfigFlags& flags, const std::string& data_dir,
              const std::string& out_path, const std::string& loss_csv) {
  FusionConfig cfg = resolve_config(config_path, flags);
  print_config(cfg);
  auto ir = read_frame_dir(data_dir + "/ir");
  auto vis = read_frame_dir(data_dir + "/vis");
  TrainResult result = train(cfg, ir, vis);
  save_weights(out_path, result.weights);
  if (!loss_csv.empty()) {
    std::vector<std::vector<std::string>> rows;
    for (const auto& row : result.log)
      rows.push_back({std::to_string(row.iter), csv_value(row.loss), csv_value(row.moving_avg),
                      std::string(csv_value(row.lr * 1e6)) /* micro-units keep 6 decimals useful */});
    write_csv(loss_csv, {"iter", "loss", "moving_avg", "lr_micro"}, rows);
  }
  std::cout << "trained " << cfg.iters << " iterations, final loss "
            << csv_value(result.log.back().loss) << ", weights -> " << out_path << "\n";
  return 0;
}

FusionConfig config_for_weights(const WeightStore& store, const std::string& config_path,
                                const ConfigFlags& flags) {
  FusionConfig cfg = config_path.empty() ? FusionConfig{} : read_config(config_path);
  flags.apply(cfg);
  // Shapes pin channels and patch; infer them when no config names them.
  const Tensor<float>* enc = store.find("enc_ir_w1");
  const Tensor<float>* wq = store.find("attn_wq");
  if (enc && wq) {
    const int channels = static_cast<int>(enc->extent(0));
    const double d = static_cast<double>(wq->extent(0));
    const int patch = static_cast<int>(std::lround(std::sqrt(d / channels)));
    if (config_path.empty() && !flags.channels) cfg.channels = channels;
    if (config_path.empty() && !flags.patch) cfg.patch = patch;
  }
  cfg.validate();
  return cfg;
}

int cmd_fuse(const std::string& ir_dir, const std::string& vis_dir, const std::string& weights_path,
             const std::string& out_dir, const std::string& flow_dir,
             const std::string& config_path, const ConfigFlags& flags, int jobs) {
  WeightStore store = load_weights(weights_path);
  FusionConfig cfg = config_for_weights(store, config_path, flags);
  print_config(cfg);
  FusionModel<float> model = model_from_weights<float>(cfg, store);
  auto ir = read_frame_dir(ir_dir);
  auto vis = read_frame_dir(vis_dir);
  if (ir.size() != vis.size())
    throw IoError("fuse: " + ir_dir + " has " + std::to_string(ir.size()) + " frames but " +
                  vis_dir + " has " + std::to_string(vis.size()));
  const Index h = ir[0].extent(0), w = ir[0].extent(1);
  SequenceFlows<float> flows = flow_dir.empty() ? estimate_sequence_flows(vis)
                                                : load_flow_dir(flow_dir, ir.size(), h, w);

  std::vector<Tensor<float>> fused(ir.size());
  auto worker = [&](std::size_t begin, std::size_t end) {
    for (std::size_t t = begin; t < end; ++t)
      fused[t] =
          fuse_forward(model, triplet_at(ir, t), triplet_at(vis, t), flows.prev[t], flows.next[t]);
  };
  if (jobs <= 1) {
    worker(0, ir.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t per = (ir.size() + jobs - 1) / jobs;
    for (int j = 0; j < jobs; ++j) {
      const std::size_t b = std::min(ir.size(), j * per), e = std::min(ir.size(), (j + 1) * per);
      if (b < e) pool.emplace_back(worker, b, e);
    }
    for (auto& th : pool) th.join();
  }
  for (const auto& f : fused)
    if (!all_finite(f)) throw NumericError("fuse: non-finite output frame");
  write_sequence(out_dir, "fused", fused);
  std::cout << "fused " << fused.size() << " frames -> " << out_dir << "\n";
  return 0;
}

int cmd_metrics(const std::string& fused_dir, const std::string& ir_dir,
                const std::string& vis_dir, const std::string& out_csv) {
  auto fused = read_frame_dir(fused_dir);
  auto ir = read_frame_dir(ir_dir);
  auto vis = read_frame_dir(vis_dir);
  if (ir.size() != fused.size() || vis.size() != fused.size())
    throw IoError("metrics: sequence lengths differ (fused " + std::to_string(fused.size()) +
                  " in " + fused_dir + ", ir " + std::to_string(ir.size()) + ", vis " +
                  std::to_string(vis.size()) + ")");
  MetricReport report = evaluate_metrics(fused, ir, vis);
  write_metric_csv(out_csv, report);
  for (const auto& s : report.series)
    std::cout << s.name << " mean = " << csv_value(s.mean()) << "\n";
  std::cout << "report -> " << out_csv << "\n";
  return 0;
}

int cmd_bench(const std::string& n_list, double tau, int d, int k_max, const std::string& kv_mode,
              const std::string& out_csv) {
  const KvMode mode = kv_mode == "global_token_only" ? KvMode::global_token_only : KvMode::all_patches;
  std::vector<Index> ns;
  std::stringstream ss(n_list);
  for (std::string tok; std::getline(ss, tok, ',');) ns.push_back(std::stoll(tok));
  if (ns.empty()) throw ValueError("bench: empty --n-list");
  std::cout << "# bench tau=" << tau << " d=" << d << " k_max=" << k_max << " kv_mode="
            << (mode == KvMode::all_patches ? "all_patches" : "global_token_only") << "\n";

  // Wall-clock comparison goes to stdout only; the CSV stays deterministic.
  std::mt19937_64 rng(1);
  for (Index n : ns) {
    const Index k = std::max<Index>(1, std::min<Index>(static_cast<Index>(n * tau), k_max));
    Tensor<float> tokens = uniform<float>(Shape{n, d}, rng, -1.0, 1.0);
    AttentionProj<float> proj{uniform<float>(Shape{d, d}, rng, -0.1, 0.1),
                              uniform<float>(Shape{d, d}, rng, -0.1, 0.1),
                              uniform<float>(Shape{d, d}, rng, -0.1, 0.1)};
    std::vector<Index> omega(k);
    for (Index i = 0; i < k; ++i) omega[i] = i;
    Tensor<float> x_sel = gather_rows(tokens, omega);
    Tensor<float> kv = build_kv(tokens, global_token(tokens), mode);
    auto t0 = std::chrono::steady_clock::now();
    sparse_attention(x_sel, kv, proj);
    auto t1 = std::chrono::steady_clock::now();
    sparse_attention(tokens, tokens, proj);  // dense baseline: all queries, raw tokens as K/V
    auto t2 = std::chrono::steady_clock::now();
    std::cout << "N=" << n << " k=" << k << ": sparse "
              << csv_value(std::chrono::duration<double, std::milli>(t1 - t0).count())
              << " ms, dense "
              << csv_value(std::chrono::duration<double, std::milli>(t2 - t1).count()) << " ms\n";
  }
  write_bench_csv(out_csv, ns, tau, d, k_max, mode, FusionConfig{});
  std::cout << "bench table -> " << out_csv << "\n";
  return 0;
}

int cmd_ablate(const std::string& config_path, const ConfigFlags& flags,
               const std::string& data_dir, const std::string& out_csv,
               const std::string& variants_arg) {
  FusionConfig cfg = resolve_config(config_path, flags);
  print_config(cfg);
  std::vector<Variant> variants;
  std::stringstream ss(variants_arg);
  for (std::string tok; std::getline(ss, tok, ',');) variants.push_back(variant_from_name(tok));
  auto ir = read_frame_dir(data_dir + "/ir");
  auto vis = read_frame_dir(data_dir + "/vis");
  auto rows = ablate(cfg, variants, ir, vis);
  std::vector<std::vector<std::string>> csv_rows;
  for (const auto& r : rows) {
    csv_rows.push_back(
        {r.variant, csv_value(r.qabf), csv_value(r.piella_qs), csv_value(r.ssim), csv_value(r.ms2r)});
    std::cout << r.variant << ": qabf=" << csv_value(r.qabf) << " qs=" << csv_value(r.piella_qs)
              << " ssim=" << csv_value(r.ssim) << " ms2r_proxy=" << csv_value(r.ms2r) << "\n";
  }
  write_csv(out_csv, {"variant", "qabf", "piella_qs", "ssim", "ms2r_proxy"}, csv_rows);
  std::cout << "ablation table -> " << out_csv << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"motion-aware sparse-interaction video fusion"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "generate a synthetic paired sequence");
  std::string synth_spec, synth_out;
  synth->add_option("--spec", synth_spec, "scene spec file (defaults to the built-in scene)");
  synth->add_option("--out", synth_out, "output directory")->required();

  auto* train_cmd = app.add_subcommand("train", "train fusion weights");
  std::string train_config, train_data, train_out, train_loss_csv;
  ConfigFlags train_flags;
  train_cmd->add_option("--config", train_config, "config file");
  train_cmd->add_option("--data", train_data, "data directory with ir/ and vis/")->required();
  train_cmd->add_option("--out", train_out, "output weights path")->required();
  train_cmd->add_option("--loss-csv", train_loss_csv, "loss curve CSV path");
  train_flags.attach(train_cmd);

  auto* fuse_cmd = app.add_subcommand("fuse", "fuse an ir/vis sequence");
  std::string fuse_ir, fuse_vis, fuse_weights, fuse_out, fuse_flow, fuse_config;
  int fuse_jobs = 1;
  ConfigFlags fuse_flags;
  fuse_cmd->add_option("--ir", fuse_ir, "infrared frame directory")->required();
  fuse_cmd->add_option("--vis", fuse_vis, "visible frame directory")->required();
  fuse_cmd->add_option("--weights", fuse_weights, "weights file")->required();
  fuse_cmd->add_option("--out", fuse_out, "output frame directory")->required();
  fuse_cmd->add_option("--flow", fuse_flow, "flow directory (fwd_/bwd_ .flo files)");
  fuse_cmd->add_option("--config", fuse_config, "config file");
  fuse_cmd->add_option("--jobs", fuse_jobs, "parallel frame jobs (default 1)");
  fuse_flags.attach(fuse_cmd);

  auto* metrics_cmd = app.add_subcommand("metrics", "evaluate fusion metrics");
  std::string m_fused, m_ir, m_vis, m_out;
  metrics_cmd->add_option("--fused", m_fused, "fused frame directory")->required();
  metrics_cmd->add_option("--ir", m_ir, "infrared frame directory")->required();
  metrics_cmd->add_option("--vis", m_vis, "visible frame directory")->required();
  metrics_cmd->add_option("--out", m_out, "report CSV path")->required();

  auto* bench_cmd = app.add_subcommand("bench", "attention cost sweep and pipeline scaling table");
  std::string b_nlist, b_out, b_kv = "all_patches";
  double b_tau = 0.25;
  int b_d = 64, b_kmax = 256;
  bench_cmd->add_option("--n-list", b_nlist, "comma-separated token counts")->required();
  bench_cmd->add_option("--tau", b_tau, "retention ratio");
  bench_cmd->add_option("--d", b_d, "token dimension");
  bench_cmd->add_option("--k-max", b_kmax, "selected-patch cap");
  bench_cmd->add_option("--kv-mode", b_kv, "all_patches|global_token_only");
  bench_cmd->add_option("--out", b_out, "output CSV path")->required();

  auto* ablate_cmd = app.add_subcommand("ablate", "train and compare ablation variants");
  std::string a_config, a_data, a_out;
  std::string a_variants = "full,full_db,full_sb,inverted_mask,dense_attention,no_mafm";
  ConfigFlags ablate_flags;
  ablate_cmd->add_option("--config", a_config, "config file");
  ablate_cmd->add_option("--data", a_data, "data directory with ir/ and vis/")->required();
  ablate_cmd->add_option("--out", a_out, "comparison CSV path")->required();
  ablate_cmd->add_option("--variants", a_variants, "comma-separated variant list");
  ablate_flags.attach(ablate_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << e.what() << "\n\n" << app.help() << "\n";
    return 1;
  }

  try {
    if (synth->parsed()) return cmd_synth(synth_spec, synth_out);
    if (train_cmd->parsed())
      return cmd_train(train_config, train_flags, train_data, train_out, train_loss_csv);
    if (fuse_cmd->parsed())
      return cmd_fuse(fuse_ir, fuse_vis, fuse_weights, fuse_out, fuse_flow, fuse_config, fuse_flags,
                      fuse_jobs);
    if (metrics_cmd->parsed()) return cmd_metrics(m_fused, m_ir, m_vis, m_out);
    if (bench_cmd->parsed()) return cmd_bench(b_nlist, b_tau, b_d, b_kmax, b_kv, b_out);
    if (ablate_cmd->parsed())
      return cmd_ablate(a_config, ablate_flags, a_data, a_out, a_variants);
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
