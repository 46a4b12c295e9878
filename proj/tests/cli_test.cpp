#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "dspreg/commands.hpp"

using namespace dspreg;

namespace {

const fs::path kConfigs = fs::path(DSPREG_SOURCE_DIR) / "configs";

struct Cli {
  std::ostringstream out, err;
  int code = -1;
};

Cli run(std::vector<std::string> args) {
  args.insert(args.begin(), "dspreg");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  Cli c;
  c.code = run_cli(static_cast<int>(argv.size()), argv.data(), c.out, c.err);
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dspreg_cli_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Small fast training setup shared by the train tests.
std::vector<std::string> small(std::vector<std::string> args) {
  for (const char* s : {"dataset.samples_per_domain=60", "model.hidden=4", "train.epochs=3", "train.batch_size=16"}) {
    args.push_back("--set");
    args.push_back(s);
  }
  return args;
}

}  // namespace

TEST(CliGenerate, WritesOneFilePerDomainAndManifest) {
  const auto root = scratch("gen");
  const auto r = run({"generate", "--config", (kConfigs / "default.ini").string(), "--out", root.string()});
  ASSERT_EQ(r.code, 0) << r.err.str();
  for (const char* f : {"domain_d0.csv", "domain_d1.csv", "domain_d2.csv", "manifest.json", "config.ini"})
    EXPECT_TRUE(fs::exists(root / "data" / f)) << f;
  EXPECT_FALSE(fs::exists(root / "data" / "domain_d3.csv"));
}

TEST(CliGenerate, SameSeedSameBytesDifferentSeedDifferentBytes) {
  const auto a = scratch("gen_a"), b = scratch("gen_b"), c = scratch("gen_c");
  ASSERT_EQ(run({"generate", "--out", a.string(), "--seed", "7"}).code, 0);
  ASSERT_EQ(run({"generate", "--out", b.string(), "--seed", "7"}).code, 0);
  ASSERT_EQ(run({"generate", "--out", c.string(), "--seed", "8"}).code, 0);
  for (const char* f : {"domain_d0.csv", "domain_d1.csv", "domain_d2.csv"}) {
    EXPECT_EQ(slurp(a / "data" / f), slurp(b / "data" / f)) << f;
    EXPECT_NE(slurp(a / "data" / f), slurp(c / "data" / f)) << f;
  }
}

TEST(CliGenerate, NumDomainsOverride) {
  const auto root = scratch("gen_d5");
  ASSERT_EQ(run({"generate", "--out", root.string(), "--set", "dataset.num_domains=5", "--set",
                 "dataset.spurious_scales=1,2,3,4,5"})
                .code,
            0);
  EXPECT_TRUE(fs::exists(root / "data" / "domain_d4.csv"));
}

TEST(CliTrain, SplitOutOfRangeIsUsageError) {
  const auto root = scratch("split_oob");
  const auto r = run(small({"train", "--split", "3", "--out", root.string()}));
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.str().find("split"), std::string::npos) << r.err.str();
}

TEST(CliTrain, MissingSplitIsUsageError) { EXPECT_EQ(run({"train"}).code, kExitUsage); }

TEST(CliTrain, NoSubcommandIsUsageError) { EXPECT_EQ(run({}).code, kExitUsage); }

TEST(CliTrain, LambdaZeroIsLabelledErm) {
  const auto root = scratch("erm");
  const auto r = run(small({"train", "--split", "0", "--seed", "1", "--set", "train.lambda=0", "--out", root.string()}));
  ASSERT_EQ(r.code, 0) << r.err.str();
  const auto s = nlohmann::json::parse(slurp(root / "train" / "split0" / "seed1" / "summary.json"));
  EXPECT_EQ(s["mode"], "erm");
  EXPECT_EQ(s["lambda"], 0.0);
}

TEST(CliTrain, ThreeSeedsGiveThreeRunsAndAggregate) {
  const auto root = scratch("seeds");
  const auto r = run(small({"train", "--split", "2", "--seed", "0,1,2", "--out", root.string()}));
  ASSERT_EQ(r.code, 0) << r.err.str();
  const fs::path base = root / "train" / "split2";
  for (const char* s : {"seed0", "seed1", "seed2"}) {
    for (const char* f : {"metrics.jsonl", "params.csv", "summary.json", "summary.txt", "config.ini"})
      EXPECT_TRUE(fs::exists(base / s / f)) << s << '/' << f;
    EXPECT_FALSE(fs::is_empty(base / s / "coefficients")) << s;
  }
  const auto agg = nlohmann::json::parse(slurp(base / "aggregate.json"));
  ASSERT_EQ(agg["runs"].size(), 3u);
  std::vector<double> losses;
  for (const auto& run : agg["runs"]) losses.push_back(run["summary"]["final_heldout"]["loss"]);
  const auto ms = mean_std(losses);
  EXPECT_NEAR(agg["heldout_loss"]["mean"].get<double>(), ms.mean, 1e-12);
  EXPECT_NEAR(agg["heldout_loss"]["std"].get<double>(), ms.std, 1e-12);
  EXPECT_GT(ms.std, 0.0);
  EXPECT_NE(r.out.str().find("±"), std::string::npos);
}

TEST(CliTrain, MetricsHaveOneRecordPerEpoch) {
  const auto root = scratch("metrics");
  ASSERT_EQ(run(small({"train", "--split", "1", "--seed", "0", "--out", root.string()})).code, 0);
  std::ifstream is(root / "train" / "split1" / "seed0" / "metrics.jsonl");
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["epoch"], n);
    EXPECT_TRUE(j.contains("heldout"));
    EXPECT_TRUE(j.contains("validation"));
    ++n;
  }
  EXPECT_EQ(n, 3);
}

TEST(CliTrain, ResolvedConfigIsPersistedAndReloadable) {
  const auto root = scratch("persist");
  ASSERT_EQ(run(small({"train", "--split", "0", "--seed", "3", "--set", "train.t_update=3", "--out", root.string()}))
                .code,
            0);
  const auto c = load_config(root / "train" / "split0" / "seed3" / "config.ini");
  EXPECT_EQ(c.train.t_update, 3u);
  EXPECT_EQ(c.seeds, std::vector<std::uint64_t>{3});
  EXPECT_EQ(c.synthetic.samples_per_domain, 60u);
  EXPECT_EQ(c.hidden, std::vector<std::size_t>{4});
}

TEST(CliTrain, SameSeedReproducesParameters) {
  const auto a = scratch("rep_a"), b = scratch("rep_b");
  ASSERT_EQ(run(small({"train", "--split", "0", "--seed", "2", "--out", a.string()})).code, 0);
  ASSERT_EQ(run(small({"train", "--split", "0", "--seed", "2", "--out", b.string()})).code, 0);
  EXPECT_EQ(slurp(a / "train/split0/seed2/params.csv"), slurp(b / "train/split0/seed2/params.csv"));
}

TEST(CliTrain, OutputEnvIsUsedWithoutOutFlag) {
  const auto root = scratch("env");
  ::setenv(kOutputEnv, root.string().c_str(), 1);
  const auto r = run(small({"train", "--split", "0", "--seed", "0"}));
  ::unsetenv(kOutputEnv);
  ASSERT_EQ(r.code, 0) << r.err.str();
  EXPECT_TRUE(fs::exists(root / "train" / "split0" / "seed0" / "summary.json"));
}

TEST(CliConfig, DefaultsWithoutConfigFile) {
  const auto c = load_config(std::nullopt);
  EXPECT_EQ(c.train.lambda, 1e-3);
  EXPECT_EQ(c.train.t_update, 2u);
}

TEST(CliConfig, ShippedConfigsLoad) {
  const auto d = load_config(kConfigs / "default.ini");
  EXPECT_EQ(d.train.lambda, 1e-3);
  EXPECT_EQ(d.train.t_update, 2u);
  EXPECT_NO_THROW(check_config(d));
  const auto s = load_config(kConfigs / "shortcut.ini");
  EXPECT_TRUE(s.tune_lambda);
  EXPECT_NO_THROW(check_config(s));
}

TEST(CliConfig, UnknownKeyIsDataError) {
  const auto r = run({"train", "--split", "0", "--set", "train.lamda=0.1", "--out", scratch("unk").string()});
  EXPECT_EQ(r.code, kExitData);
  EXPECT_NE(r.err.str().find("lamda"), std::string::npos) << r.err.str();
}

TEST(CliConfig, MalformedOverrideIsUsageError) {
  EXPECT_EQ(run({"train", "--split", "0", "--set", "lambda", "--out", scratch("bad_ov").string()}).code, kExitUsage);
}

TEST(CliConfig, BadIniIsParseError) {
  const auto dir = scratch("bad_ini");
  fs::create_directories(dir);
  {
    std::ofstream os(dir / "bad.ini");
    os << "[train\nlambda = 0.1\n";
  }
  const auto r = run({"train", "--split", "0", "--config", (dir / "bad.ini").string(), "--out", dir.string()});
  EXPECT_EQ(r.code, kExitData);
  EXPECT_NE(r.err.str().find("bad.ini"), std::string::npos) << r.err.str();
}

TEST(CliConfig, MissingConfigFileIsDataError) {
  EXPECT_EQ(run({"validate", "--config", "/nonexistent/x.ini"}).code, kExitData);
}

TEST(CliConfig, MissingCsvPathIsDataError) {
  const auto r = run({"train", "--split", "0", "--set", "dataset.source=csv", "--set",
                      "dataset.csv_paths=/nonexistent/a.csv,/nonexistent/b.csv", "--out", scratch("csv").string()});
  EXPECT_EQ(r.code, kExitData);
}

TEST(CliConfig, TrainsFromGeneratedCsv) {
  const auto root = scratch("from_csv");
  ASSERT_EQ(run({"generate", "--out", root.string(), "--set", "dataset.samples_per_domain=60"}).code, 0);
  const fs::path d = root / "data";
  const std::string paths =
      (d / "domain_d0.csv").string() + "," + (d / "domain_d1.csv").string() + "," + (d / "domain_d2.csv").string();
  const auto r = run({"train", "--split", "1", "--seed", "0", "--set", "dataset.source=csv", "--set",
                      "dataset.csv_paths=" + paths, "--set", "train.epochs=2", "--out", root.string()});
  ASSERT_EQ(r.code, 0) << r.err.str();
  EXPECT_TRUE(fs::exists(root / "train" / "split1" / "seed0" / "summary.json"));
}

TEST(CliValidate, PassesAndWritesReport) {
  const auto root = scratch("validate");
  const auto r = run({"validate", "--out", root.string(), "--set", "validate.checks=decomposition,contamination"});
  ASSERT_EQ(r.code, 0) << r.err.str();
  const auto rep = nlohmann::json::parse(slurp(root / "validate" / "report.json"));
  EXPECT_TRUE(rep["passed"].get<bool>());
  EXPECT_EQ(rep["checks"].size(), 2u);
}

TEST(CliValidate, InjectedFaultExitsOne) {
  const auto r = run({"validate", "--out", scratch("fault").string(), "--set", "validate.checks=gradients", "--set",
                      "validate.fault=corrupt-gradient"});
  EXPECT_EQ(r.code, kExitValidation);
  EXPECT_NE(r.out.str().find("FAIL gradients"), std::string::npos) << r.out.str();
}

TEST(CliValidate, UnknownCheckIsDataError) {
  EXPECT_EQ(run({"validate", "--set", "validate.checks=bogus", "--out", scratch("bogus").string()}).code, kExitData);
}

TEST(CliAblate, SummaryHasAllModesAndSplits) {
  const auto root = scratch("ablate");
  const auto r = run(small({"ablate", "--seed", "0", "--out", root.string()}));
  ASSERT_EQ(r.code, 0) << r.err.str();
  std::ifstream is(root / "ablate" / "summary.csv");
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "run_id,mode,lambda,t_update,seed,split,heldout_metric");
  std::set<std::string> modes, splits;
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    ASSERT_EQ(f.size(), 7u) << line;
    modes.insert(f[1]);
    splits.insert(f[5]);
    ++rows;
  }
  EXPECT_EQ(modes, (std::set<std::string>{"dynamic", "static", "uniform", "erm"}));
  EXPECT_EQ(splits, (std::set<std::string>{"0", "1", "2"}));
  EXPECT_EQ(rows % 3, 0u);
  EXPECT_NE(r.out.str().find("ordering full <= uniform <= erm"), std::string::npos);
}
