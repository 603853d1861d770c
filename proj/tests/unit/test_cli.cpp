#include <gtest/gtest.h>
#include <sys/wait.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mtgaze/model.hpp"
#include "mtgaze/train.hpp"

#ifndef MTGAZE_CLI_PATH
#error "MTGAZE_CLI_PATH must point at the mtgaze executable"
#endif

using namespace mtgaze;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

fs::path scratch() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / ("mtgaze_cli_" + std::to_string(::getpid()));
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

CliRun cli(const std::string& args) {
  const auto out = scratch() / "stdout.txt", err = scratch() / "stderr.txt";
  const std::string cmd = std::string(MTGAZE_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  CliRun r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

std::string p(const std::string& name) { return (scratch() / name).string(); }

const char* kTinyConfig = R"({"input_hw": 32, "feature_width": 64, "mrm_hidden": 16, "sca_window": 4,
 "bnecks": [
  {"in":16,"exp":16,"out":16,"uc_k":5,"se":false,"act":"relu","stride":2},
  {"in":16,"exp":32,"out":24,"uc_k":5,"se":true,"act":"hswish","stride":1},
  {"in":24,"exp":48,"out":24,"uc_k":7,"se":false,"act":"hswish","stride":2}],
 "sca_after": [1, 3]})";

std::string tiny_config_path() {
  const auto path = p("tiny.json");
  std::ofstream(path) << kTinyConfig;
  return path;
}

std::int64_t total_from_csv(const std::string& csv, int column) {
  const auto pos = csv.find("TOTAL,");
  std::stringstream ss(csv.substr(pos + 6));
  std::string a, b;
  std::getline(ss, a, ',');
  std::getline(ss, b);
  return std::stoll(column == 0 ? a : b);
}

}  // namespace

TEST(Cli, SummaryDefaultWindowAndAblation) {
  CliRun r = cli("summary --csv " + p("full.csv"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("TOTAL"), std::string::npos);
  EXPECT_NE(r.err.find("resolved"), std::string::npos);  // config echo goes to stderr
  EXPECT_EQ(r.out.find("resolved"), std::string::npos);
  const auto csv = slurp(p("full.csv"));
  const auto params = total_from_csv(csv, 0), macs = total_from_csv(csv, 1);
  EXPECT_GE(params, 2'400'000);
  EXPECT_LE(params, 3'300'000);
  EXPECT_GE(macs, 190'000'000);
  EXPECT_LE(macs, 290'000'000);
  CliRun a = cli("summary --ablate mrm --csv " + p("mrm.csv"));
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_LT(total_from_csv(slurp(p("mrm.csv")), 0), params);
  // rerun gives identical bytes
  ASSERT_EQ(cli("summary --csv " + p("full2.csv")).code, 0);
  EXPECT_EQ(slurp(p("full2.csv")), csv);
}

TEST(Cli, SummaryErrors) {
  CliRun r = cli("summary --config " + p("missing.json"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("missing.json"), std::string::npos) << r.err;
  std::ofstream(p("bad.json")) << R"({"input_hw": 224, "surprise": true})";
  EXPECT_EQ(cli("summary --config " + p("bad.json")).code, 1);
  EXPECT_EQ(cli("summary --ablate foo").code, 1);
  EXPECT_EQ(cli("summary --frobnicate").code, 1);
  EXPECT_EQ(cli("nosuchcommand").code, 1);
}

TEST(Cli, Counts) {
  CliRun r = cli("counts --kh 5 --kw 5 --cin 40 --cout 40 --hout 56 --wout 56 --uc --verify");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("params 40000, macs 125440000"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("params 16000, macs 50176000"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("60.00%"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("counter 125440000 == 125440000"), std::string::npos) << r.out;
  CliRun one = cli("counts --kh 1 --kw 1 --cin 1 --cout 1 --hout 1 --wout 1");
  ASSERT_EQ(one.code, 0);
  EXPECT_NE(one.out.find("params 1, macs 1"), std::string::npos) << one.out;
  CliRun dw = cli("counts --kh 3 --kw 7 --cin 12 --cout 12 --hout 9 --wout 5 --depthwise --uc --verify");
  ASSERT_EQ(dw.code, 0) << dw.err;
  EXPECT_NE(dw.out.find("params 252, macs 11340"), std::string::npos) << dw.out;
  EXPECT_EQ(cli("counts --kh 0 --kw 1 --cin 1 --cout 1 --hout 1 --wout 1").code, 1);
  EXPECT_EQ(cli("counts --kh 3 --kw 3 --cin 1 --cout 1 --hout -2 --wout 1").code, 1);
  EXPECT_EQ(cli("counts --kh 3 --kw 3").code, 1);
}

TEST(Cli, ErfBoxes) {
  CliRun a = cli("erf --stack uc7x3 --out " + p("uc7.pgm") + " --csv " + p("uc7.csv"));
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_NE(a.out.find("theoretical rf 19x19"), std::string::npos) << a.out;
  EXPECT_NE(a.out.find("heatmap support 19x19"), std::string::npos) << a.out;
  EXPECT_EQ(slurp(p("uc7.pgm")).rfind("P5\n39 39\n255\n", 0), 0u);
  CliRun b = cli("erf --stack std5x4 --out " + p("s4.pgm"));
  ASSERT_EQ(b.code, 0);
  EXPECT_NE(b.out.find("theoretical rf 17x17"), std::string::npos);
  for (const char* s : {"std5x3", "uc5x3"}) {
    CliRun c = cli(std::string("erf --stack ") + s + " --format ascii --bits 16 --out " + p("s.pgm"));
    ASSERT_EQ(c.code, 0);
    EXPECT_NE(c.out.find("theoretical rf 13x13"), std::string::npos);
    EXPECT_NE(c.out.find("heatmap support 13x13"), std::string::npos);
    EXPECT_EQ(slurp(p("s.pgm")).rfind("P2\n", 0), 0u);
  }
  ASSERT_EQ(cli("erf --stack uc7x3 --out " + p("uc7b.pgm") + " --csv " + p("uc7b.csv")).code, 0);
  EXPECT_EQ(slurp(p("uc7.pgm")), slurp(p("uc7b.pgm")));
  EXPECT_EQ(slurp(p("uc7.csv")), slurp(p("uc7b.csv")));
  EXPECT_EQ(cli("erf --stack bogus --out " + p("x.pgm")).code, 1);
  EXPECT_EQ(cli("erf --stack uc7x3 --extent 10 --out " + p("x.pgm")).code, 1);
  EXPECT_EQ(cli("erf --stack uc7x3 --bits 12 --out " + p("x.pgm")).code, 1);
}

TEST(Cli, GradcheckPassesDeterministicAndImpossibleTolerance) {
  CliRun a = cli("gradcheck --seed 3");
  ASSERT_EQ(a.code, 0) << a.out << a.err;
  for (const char* block : {"conv2d", "dense", "batchnorm", "uc", "bneck", "sca", "gcm", "mrm", "loss"}) {
    EXPECT_NE(a.out.find(block), std::string::npos) << block;
  }
  CliRun b = cli("gradcheck --seed 3");
  EXPECT_EQ(a.out, b.out);
  CliRun z = cli("gradcheck --seed 3 --tol 0");
  EXPECT_EQ(z.code, 2);
  EXPECT_NE(z.err.find("conv2d"), std::string::npos) << z.err;
}

TEST(Cli, TrainZeroLrEqualsUntrainedAndEvalRoundTrip) {
  const auto cfg = tiny_config_path();
  const std::string common = "train --config " + cfg + " --samples 64 --holdout 16 --batch 16 --seed 7 ";
  CliRun t = cli(common + "--epochs 2 --lr 0 --out " + p("w0.bin") + " --metrics " + p("m0.csv"));
  ASSERT_EQ(t.code, 0) << t.err;
  // untouched weights: same bytes as a freshly built model with the same seed
  Model fresh = Model::build(ModelConfig::load_file(cfg), 7);
  fresh.save(p("fresh.bin"));
  EXPECT_EQ(slurp(p("w0.bin")), slurp(p("fresh.bin")));
  ASSERT_EQ(cli("eval --weights " + p("w0.bin") + " --n 24 --seed 2 --csv " + p("e0.csv")).code, 0);
  ASSERT_EQ(cli("eval --weights " + p("fresh.bin") + " --n 24 --seed 2 --csv " + p("ef.csv")).code, 0);
  EXPECT_EQ(slurp(p("e0.csv")), slurp(p("ef.csv")));

  // trained weights: eval, then reload-and-resave, eval again
  CliRun t2 = cli(common + "--epochs 2 --lr 0.01 --out " + p("w1.bin") + " --metrics " + p("m1.csv"));
  ASSERT_EQ(t2.code, 0) << t2.err;
  ASSERT_EQ(cli("eval --weights " + p("w1.bin") + " --n 24 --seed 2 --csv " + p("e1.csv")).code, 0);
  Model reloaded = Model::load(p("w1.bin"));
  reloaded.save(p("w1r.bin"));
  EXPECT_EQ(slurp(p("w1.bin")), slurp(p("w1r.bin")));
  ASSERT_EQ(cli("eval --weights " + p("w1r.bin") + " --n 24 --seed 2 --csv " + p("e1r.csv")).code, 0);
  EXPECT_EQ(slurp(p("e1.csv")), slurp(p("e1r.csv")));
  EXPECT_NE(slurp(p("e1.csv")), slurp(p("e0.csv")));

  // same flags, same bytes
  ASSERT_EQ(cli(common + "--epochs 2 --lr 0.01 --out " + p("w2.bin") + " --metrics " + p("m2.csv")).code, 0);
  EXPECT_EQ(slurp(p("m1.csv")), slurp(p("m2.csv")));
  EXPECT_EQ(slurp(p("w1.bin")), slurp(p("w2.bin")));
  EXPECT_EQ(slurp(p("m1.csv")).rfind("epoch,l_total,l_yaw,l_pitch,l_joint,ang_err_deg\n", 0), 0u);
}

TEST(Cli, TrainAndEvalErrors) {
  const auto cfg = tiny_config_path();
  EXPECT_EQ(cli("train --config " + cfg + " --epochs 1 --batch 0 --samples 64 --holdout 16 --out " + p("x.bin")).code, 1);
  EXPECT_EQ(cli("train --config " + cfg + " --epochs 1 --lr -1 --samples 64 --holdout 16 --out " + p("x.bin")).code, 1);
  EXPECT_EQ(cli("train --config " + cfg + " --epochs 1 --samples 16 --holdout 16 --out " + p("x.bin")).code, 1);
  EXPECT_EQ(cli("eval --weights " + p("nothing.bin")).code, 1);
  std::ofstream(p("garbage.bin")) << "NOPE and some bytes";
  CliRun g = cli("eval --weights " + p("garbage.bin"));
  EXPECT_EQ(g.code, 1);
  EXPECT_NE(g.err.find("magic"), std::string::npos) << g.err;
  Model::build(ModelConfig::load_file(cfg), 1).save(p("valid.bin"));
  EXPECT_EQ(cli("eval --weights " + p("valid.bin") + " --n 0").code, 1);
  EXPECT_EQ(cli("eval --weights " + p("valid.bin") + " --n 4").code, 0);
}
