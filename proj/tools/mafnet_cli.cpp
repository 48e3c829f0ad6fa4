#include <CLI11.hpp>

#include <iostream>

#include "mafnet/cli.hpp"

using namespace mafnet;
using namespace mafnet::cli;

namespace {

std::array<int, 3> parse_dims(const std::string& s) {
  std::array<int, 3> d{};
  char c1 = 0, c2 = 0;
  std::istringstream is(s);
  require(static_cast<bool>(is >> d[0] >> c1 >> d[1] >> c2 >> d[2]) && c1 == ',' && c2 == ',' && is.peek() == EOF,
          ErrorCode::Usage, "--dims expects X,Y,Z");
  return d;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-encoder T1ce synthesis and brain tumor segmentation"};
  app.require_subcommand(1);

  PhantomArgs phantom;
  std::string dims = "240,240,155";
  auto* ph = app.add_subcommand("phantom", "write a BraTS-layout phantom dataset");
  ph->add_option("--out", phantom.out, "output dataset directory")->required();
  ph->add_option("--cases", phantom.cases, "number of cases")->capture_default_str();
  ph->add_option("--seed", phantom.seed, "random seed")->capture_default_str();
  ph->add_option("--dims", dims, "volume extents X,Y,Z")->capture_default_str();
  ph->add_option("--noise", phantom.noise_sigma, "noise sigma as a fraction of the intensity range")
      ->capture_default_str();

  TrainArgs train;
  std::string train_config, train_resume;
  auto* tr = app.add_subcommand("train", "run the two-phase training schedule");
  tr->add_option("--data", train.data, "dataset directory")->required();
  tr->add_option("--config", train_config, "TOML run configuration");
  tr->add_option("--out", train.out, "output directory")->required();
  tr->add_flag("--desk-scale", train.desk_scale, "small widths, epochs and patch counts");
  tr->add_option("--resume", train_resume, "checkpoint to continue from");
  tr->add_flag("--quiet", train.quiet, "no per-epoch progress");

  SynthesizeArgs synth;
  auto* sy = app.add_subcommand("synthesize", "write synthesized T1ce volumes, attention maps and montages");
  sy->add_option("--ckpt", synth.ckpt, "checkpoint file")->required();
  sy->add_option("--data", synth.data, "dataset directory")->required();
  sy->add_option("--out", synth.out, "output directory")->required();

  EvaluateArgs eval;
  auto* ev = app.add_subcommand("evaluate", "metrics CSV/JSON and markdown tables on the test split");
  ev->add_option("--ckpt", eval.ckpt, "checkpoint file")->required();
  ev->add_option("--data", eval.data, "dataset directory")->required();
  ev->add_option("--out", eval.out, "output directory")->required();
  ev->add_flag("--all-cases", eval.all_cases, "evaluate every case instead of the test split");

  ReportArgs report;
  auto* rp = app.add_subcommand("report", "loss curves and attention heatmaps");
  rp->add_option("--history", report.history, "history.jsonl from a training run")->required();
  rp->add_option("--out", report.out, "output directory")->required();
  rp->add_option("--attention", report.attention, "attention dumps written by synthesize");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*ph) {
      phantom.dims = parse_dims(dims);
      cmd_phantom(phantom);
      std::cout << "wrote " << phantom.cases << " cases to " << phantom.out.string() << '\n';
    } else if (*tr) {
      if (!train_config.empty()) train.config = train_config;
      if (!train_resume.empty()) train.resume = train_resume;
      const auto o = cmd_train(train);
      std::cout << (o.interrupted ? "interrupted" : "finished") << " after " << o.steps << " steps, " << o.epochs
                << " epochs\n";
      if (o.last) std::cout << "last step loss " << o.last->total << '\n';
    } else if (*sy) {
      const auto cases = cmd_synthesize(synth);
      std::cout << "synthesized " << cases.size() << " cases into " << synth.out.string() << '\n';
    } else if (*ev) {
      const auto s = cmd_evaluate(eval);
      std::cout << markdown_tables(s);
    } else if (*rp) {
      const auto o = cmd_report(report);
      std::cout << "wrote " << o.loss_figures.size() << " loss figures and " << o.attention_figures.size()
                << " attention figures\n";
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDataError;
  }
  return kOk;
}
