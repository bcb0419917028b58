#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>

#include <gtest/gtest.h>

#include "psfm/cli.hpp"
#include "test_util.hpp"

namespace psfm {
namespace {

namespace fs = std::filesystem;

struct CliResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string Slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string Quote(const std::string& s) { return "'" + s + "'"; }

// Runs the installed binary as a subprocess.
CliResult RunBinary(const std::vector<std::string>& args, const fs::path& scratch) {
  std::string cmd = Quote(PSFM_CLI_PATH);
  for (const std::string& a : args) cmd += " " + Quote(a);
  const fs::path out = scratch / "stdout.txt", err = scratch / "stderr.txt";
  cmd += " >" + Quote(out.string()) + " 2>" + Quote(err.string());
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, Slurp(out), Slurp(err)};
}

// Runs the same entry point in-process.
CliResult RunInProcess(std::vector<std::string> args) {
  args.insert(args.begin(), "psfm");
  std::vector<const char*> argv;
  for (const std::string& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::Run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::map<std::string, std::string> DirContents(const fs::path& dir) {
  std::map<std::string, std::string> m;
  for (const auto& e : fs::directory_iterator(dir)) m[e.path().filename().string()] = Slurp(e.path());
  return m;
}

fs::path SmallFixture(const std::string& name, const std::vector<std::string>& extra = {}) {
  const fs::path dir = testing::ScratchDir(name);
  std::vector<std::string> args = {"generate", "-o", dir.string(), "--frames", "8", "--points", "150",
                                   "--parallax", "0.02", "--seed", "5"};
  args.insert(args.end(), extra.begin(), extra.end());
  const CliResult r = RunInProcess(args);
  EXPECT_EQ(r.code, 0) << r.err;
  return dir;
}

TEST(Cli, Sha256KnownVector) {
  const std::string abc = "abc";
  EXPECT_EQ(cli::Sha256Hex({abc.begin(), abc.end()}), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Cli, VersionHelpAndBadFlags) {
  const fs::path scratch = testing::ScratchDir("flags");
  CliResult r = RunBinary({"--version"}, scratch);
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, std::string(cli::kVersion) + "\n");
  EXPECT_EQ(RunBinary({"--help"}, scratch).code, 0);
  EXPECT_EQ(RunBinary({}, scratch).code, 2);
  EXPECT_EQ(RunBinary({"reconstruct", "--bogus"}, scratch).code, 2);
  EXPECT_EQ(RunBinary({"frobnicate"}, scratch).code, 2);
}

TEST(Cli, GenerateDefaultIsLoadable) {
  const fs::path dir = testing::ScratchDir("gen");
  const CliResult r = RunInProcess({"generate", "-o", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"tracks.txt", "gt_traj.txt", "gt_points.ply", "gt_align.json", "spec.json", "depth_0.pfm"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_EQ(LoadDataset(dir / "tracks.txt").images().size(), 20u);
  EXPECT_EQ(RunInProcess({"validate", dir.string()}).code, 0);
}

TEST(Cli, GeneratePureRotationFixture) {
  const fs::path dir = testing::ScratchDir("rot");
  const CliResult r = RunInProcess({"generate", "-o", dir.string(), "--parallax", "0", "--trajectory", "pure-rotation"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(nlohmann::json::parse(r.out)["parallax"], 0.0);
  EXPECT_EQ(RunInProcess({"validate", dir.string()}).code, 0);
}

TEST(Cli, GenerateInfeasibleIsUsageError) {
  const fs::path dir = testing::ScratchDir("bad");
  CliResult r = RunInProcess({"generate", "-o", dir.string(), "--parallax", "0.01", "--trajectory", "pure-rotation"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("pure-rotation"), std::string::npos);
  r = RunInProcess({"generate", "-o", dir.string(), "--trajectory", "zigzag"});
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, GenerateIsByteIdenticalAcrossProcesses) {
  const fs::path scratch = testing::ScratchDir("det");
  const std::vector<std::string> flags = {"--frames", "6", "--prior", "noisy", "--depth-noise", "0.2",
                                          "--pixel-noise", "0.5", "--outliers", "0.05", "--seed", "11"};
  std::vector<std::string> a = {"generate", "-o", (scratch / "a").string()}, b = {"generate", "-o", (scratch / "b").string()};
  a.insert(a.end(), flags.begin(), flags.end());
  b.insert(b.end(), flags.begin(), flags.end());
  ASSERT_EQ(RunBinary(a, scratch).code, 0);
  ASSERT_EQ(RunBinary(b, scratch).code, 0);
  EXPECT_EQ(DirContents(scratch / "a"), DirContents(scratch / "b"));
}

TEST(Cli, ReconstructSmoke) {
  const fs::path fixture = SmallFixture("fixture");
  const fs::path out = testing::ScratchDir("run");
  const fs::path scratch = testing::ScratchDir("io");
  const CliResult r = RunBinary({"reconstruct", (fixture / "tracks.txt").string(), "-o", out.string()}, scratch);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(ReadTum(out / "traj.txt").size(), 8u);
  EXPECT_GT(ReadPly(out / "points.ply").size(), 50u);
  const nlohmann::json manifest = nlohmann::json::parse(Slurp(out / "manifest.json"));
  for (const char* k : {"version", "seed", "config", "threads", "inputs", "events", "status", "timings", "summary"})
    EXPECT_TRUE(manifest.contains(k)) << k;
  EXPECT_EQ(manifest["status"], "ok");
  EXPECT_EQ(manifest["config"]["lambda"], "6");
  EXPECT_EQ(manifest["inputs"]["tracks.txt"], cli::Sha256File(fixture / "tracks.txt"));
  EXPECT_TRUE(manifest["inputs"].contains("depth_0.pfm"));
  std::istringstream events(Slurp(out / "events.jsonl"));
  std::string line;
  int n = 0;
  while (std::getline(events, line)) {
    EXPECT_EQ(nlohmann::json::parse(line)["seq"], n);
    ++n;
  }
  EXPECT_GT(n, 5);
}

TEST(Cli, MissingTracksNamesThePath) {
  const fs::path out = testing::ScratchDir("none");
  const std::string missing = (out / "nope" / "tracks.txt").string();
  const CliResult r = RunInProcess({"reconstruct", missing, "-o", out.string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find(missing), std::string::npos);
}

TEST(Cli, NoDepthInitIsRefused) {
  const fs::path fixture = SmallFixture("fix2");
  const fs::path out = testing::ScratchDir("out2");
  const CliResult r =
      RunInProcess({"reconstruct", (fixture / "tracks.txt").string(), "-o", out.string(), "--lambda", "0", "--no-depth-init"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--no-depth-init"), std::string::npos);
  EXPECT_NE(r.err.find("--no-depth-reg"), std::string::npos);
  EXPECT_FALSE(fs::exists(out / "traj.txt"));
}

TEST(Cli, InitializationFailureIsExitOne) {
  // Tracks without depth maps: no valid-depth pair exists.
  const fs::path dir = testing::ScratchDir("nodepth");
  detail::WriteAll(dir / "tracks.txt",
                   "TRACKS v1\n"
                   "IMG 0 500 500 319.5 239.5 640 480\n"
                   "IMG 1 500 500 319.5 239.5 640 480\n"
                   "TRK 0 0 100 120 1 110 121\n");
  const CliResult r = RunInProcess({"reconstruct", (dir / "tracks.txt").string(), "-o", (dir / "run").string()});
  EXPECT_EQ(r.code, 1);
  const nlohmann::json manifest = nlohmann::json::parse(Slurp(dir / "run" / "manifest.json"));
  EXPECT_EQ(manifest["status"], "failed");
  EXPECT_FALSE(manifest["error"].get<std::string>().empty());
  EXPECT_EQ(RunInProcess({"validate", dir.string()}).code, 1);
}

TEST(Cli, ConfigKeysAndOverrides) {
  const fs::path fixture = SmallFixture("fix3");
  const fs::path cfg = fixture / "run.cfg";
  detail::WriteAll(cfg, "# ablation\nlambda = 2.5\nseed = 9\n");
  const fs::path out = testing::ScratchDir("out3");
  CliResult r = RunInProcess({"reconstruct", (fixture / "tracks.txt").string(), "-o", out.string(), "--config", cfg.string(),
                              "--seed", "10"});
  ASSERT_EQ(r.code, 0) << r.err;
  const nlohmann::json manifest = nlohmann::json::parse(Slurp(out / "manifest.json"));
  EXPECT_EQ(manifest["config"]["lambda"], "2.5");
  EXPECT_EQ(manifest["seed"], 10);
  detail::WriteAll(cfg, "lamda = 2\n");
  r = RunInProcess({"reconstruct", (fixture / "tracks.txt").string(), "-o", out.string(), "--config", cfg.string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("lamda"), std::string::npos);
}

TEST(Cli, ManifestReproducesRun) {
  const fs::path fixture = SmallFixture("fix4", {"--prior", "noisy", "--depth-noise", "0.1", "--pixel-noise", "0.5"});
  const fs::path a = testing::ScratchDir("ra"), b = testing::ScratchDir("rb"), c = testing::ScratchDir("rc");
  const fs::path scratch = testing::ScratchDir("io4");
  const std::string tracks = (fixture / "tracks.txt").string();
  ASSERT_EQ(RunBinary({"reconstruct", tracks, "-o", a.string(), "--seed", "21", "--lambda", "3"}, scratch).code, 0);
  ASSERT_EQ(RunBinary({"reconstruct", tracks, "-o", b.string(), "--seed", "21", "--lambda", "3"}, scratch).code, 0);
  ASSERT_EQ(RunBinary({"reconstruct", tracks, "-o", c.string(), "--config", (a / "manifest.json").string()}, scratch).code, 0);
  for (const char* f : {"traj.txt", "points.ply", "events.jsonl"}) {
    EXPECT_EQ(Slurp(a / f), Slurp(b / f)) << f;
    EXPECT_EQ(Slurp(a / f), Slurp(c / f)) << f;
  }
}

TEST(Cli, EvaluateExactEstimateScoresOne) {
  const fs::path fixture = SmallFixture("fix5");
  const fs::path run = testing::ScratchDir("exact");
  fs::copy_file(fixture / "gt_traj.txt", run / "traj.txt");
  const CliResult r = RunInProcess({"evaluate", run.string(), fixture.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const nlohmann::json j = nlohmann::json::parse(Slurp(run / "metrics.json"));
  for (const char* m : {"ate", "t_rpe", "r_rpe"})
    for (const auto& [k, v] : j[m]["auc"].items()) EXPECT_EQ(v.get<double>(), 1.0) << m << " " << k;
  EXPECT_TRUE(j["depth"].is_null());
  EXPECT_NEAR(j["gt_parallax"].get<double>(), 0.02, 1e-6);
  EXPECT_TRUE(fs::exists(run / "curves.csv"));
}

TEST(Cli, EvaluateMatchesLibraryByteForByte) {
  const fs::path fixture = SmallFixture("fix6", {"--prior", "noisy", "--depth-noise", "0.1", "--pixel-noise", "0.5"});
  const fs::path run = testing::ScratchDir("run6");
  ASSERT_EQ(RunInProcess({"reconstruct", (fixture / "tracks.txt").string(), "-o", run.string()}).code, 0);
  const fs::path report = run / "r.json", csv = run / "c.csv";
  const fs::path scratch = testing::ScratchDir("io6");
  const CliResult r =
      RunBinary({"evaluate", run.string(), fixture.string(), "--report", report.string(), "--csv", csv.string()}, scratch);
  ASSERT_EQ(r.code, 0) << r.err;
  const cli::EvaluationReport lib = cli::BuildReport(cli::LoadEvaluationInputs(run, fixture), EvalConfig{});
  EXPECT_EQ(Slurp(report), lib.json.dump(2) + "\n");
  EXPECT_EQ(Slurp(csv), lib.csv);
  EXPECT_FALSE(lib.json["depth"].is_null());
  // No timings or paths leak into the metrics.
  const CliResult again =
      RunBinary({"evaluate", run.string(), fixture.string(), "--report", (run / "r2.json").string(), "--csv", csv.string()},
                scratch);
  ASSERT_EQ(again.code, 0);
  EXPECT_EQ(Slurp(report), Slurp(run / "r2.json"));
}

TEST(Cli, EvaluateDegenerateAlignmentIsExitOne) {
  const fs::path dir = testing::ScratchDir("degen");
  const std::string two = "0 0 0 0 0 0 0 1\n1 1 0 0 0 0 0 1\n";
  detail::WriteAll(dir / "traj.txt", two);
  detail::WriteAll(dir / "gt_traj.txt", two);
  EXPECT_EQ(RunInProcess({"evaluate", dir.string(), dir.string()}).code, 1);
  EXPECT_EQ(RunInProcess({"evaluate", (dir / "missing").string(), dir.string()}).code, 2);
}

}  // namespace
}  // namespace psfm
