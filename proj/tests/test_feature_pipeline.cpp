#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include <zlib.h>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "scalable_linucb/feature_pipeline.hpp"

namespace slu = scalable_linucb;
namespace fs = std::filesystem;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("slucb_fp_" + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path file(const std::string& name, const std::string& body) const {
    const fs::path p = path_ / name;
    std::ofstream(p) << body;
    return p;
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::vector<slu::Interaction> from_dense(const MatrixXd& a) {
  std::vector<slu::Interaction> out;
  std::int64_t ts = 0;
  for (Eigen::Index u = 0; u < a.rows(); ++u)
    for (Eigen::Index i = 0; i < a.cols(); ++i)
      if (a(u, i) != 0.0) out.push_back({u, i, 1.0, ts++});
  return out;
}

MatrixXd svd_reconstruction(const slu::FeatureModel& m) {
  return m.user_factors * m.item_factors.transpose();
}

}  // namespace

TEST(LoadInteractions, SmallCsvIsRemapped) {
  TempDir dir;
  const auto path = dir.file("log.csv",
                             "user_id,item_id,rating,timestamp\n"
                             "u7,i3,5,100\n"
                             "u9,i3,2,200\n"
                             "u8,i4,4,300\n");
  const slu::InteractionLog log = slu::load_interactions(path, {});
  ASSERT_EQ(log.size(), 3u);
  EXPECT_EQ(log.n_users(), 3);
  EXPECT_EQ(log.n_items(), 2);
  EXPECT_EQ(log.records[0].user, 0);
  EXPECT_EQ(log.records[1].user, 1);
  EXPECT_EQ(log.records[2].user, 2);
  EXPECT_EQ(log.records[2].item, 1);
  EXPECT_EQ(log.user_keys[1], "u9");
  EXPECT_DOUBLE_EQ(log.records[0].reward, 1.0);
  EXPECT_DOUBLE_EQ(log.records[1].reward, 0.0);
  EXPECT_DOUBLE_EQ(log.records[2].reward, 1.0);
}

TEST(LoadInteractions, SortsByTimestamp) {
  TempDir dir;
  const auto path = dir.file("log.csv",
                             "timestamp,item_id,user_id,rating\n"
                             "30,a,x,5\n"
                             "10,b,y,5\n"
                             "20,a,y,1\n"
                             "10,c,z,3\n");
  const slu::InteractionLog log = slu::load_interactions(path, {});
  ASSERT_EQ(log.size(), 4u);
  for (std::size_t i = 1; i < log.size(); ++i) EXPECT_LE(log.records[i - 1].timestamp, log.records[i].timestamp);
  // stable: "b,y" precedes "c,z" at the same timestamp
  EXPECT_EQ(log.item_keys[static_cast<std::size_t>(log.records[0].item)], "b");
  EXPECT_EQ(log.item_keys[static_cast<std::size_t>(log.records[1].item)], "c");
}

TEST(LoadInteractions, MovieLensDelimiterAndGzip) {
  TempDir dir;
  const fs::path path = dir.path() / "ratings.dat.gz";
  gzFile gz = gzopen(path.string().c_str(), "wb");
  ASSERT_NE(gz, nullptr);
  const std::string body = "1::1193::5::978300760\n1::661::3::978302109\n2::1193::4::978298413\n";
  gzwrite(gz, body.data(), static_cast<unsigned>(body.size()));
  gzclose(gz);
  const slu::InteractionLog log = slu::load_interactions(path, slu::CsvSchema::movielens());
  ASSERT_EQ(log.size(), 3u);
  EXPECT_EQ(log.n_users(), 2);
  EXPECT_EQ(log.n_items(), 2);
  EXPECT_EQ(log.user_keys[static_cast<std::size_t>(log.records[0].user)], "2");
}

TEST(LoadInteractions, ImplicitFeedback) {
  TempDir dir;
  const auto path = dir.file("log.tsv", "u\ti\tt\na\tb\t1\n");
  slu::CsvSchema s;
  s.delimiter = "\t";
  s.user_column = "u";
  s.item_column = "i";
  s.timestamp_column = "t";
  s.rating_column = "";
  const auto log = slu::load_interactions(path, s);
  EXPECT_DOUBLE_EQ(log.records[0].reward, 1.0);
}

TEST(LoadInteractions, Errors) {
  TempDir dir;
  EXPECT_THROW(slu::load_interactions(dir.path() / "absent.csv", {}), slu::DataError);
  EXPECT_THROW(slu::load_interactions(dir.file("empty.csv", ""), {}), slu::DataError);
  EXPECT_THROW(slu::load_interactions(dir.file("hdr.csv", "user_id,item_id,rating,timestamp\n"), {}), slu::DataError);
  EXPECT_THROW(slu::load_interactions(dir.file("cols.csv", "user_id,item_id,timestamp\n1,2,3\n"), {}), slu::DataError);
  try {
    slu::load_interactions(dir.file("bad.csv", "user_id,item_id,rating,timestamp\n1,2,5,10\n1,3,five,11\n"), {});
    FAIL() << "expected DataError";
  } catch (const slu::DataError& e) {
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
  }
  EXPECT_THROW(slu::load_interactions(dir.file("short.csv", "user_id,item_id,rating,timestamp\n1,2\n"), {}),
               slu::DataError);
}

TEST(LoadInteractions, MovieLens1MCounts) {
  const char* env = std::getenv("SLINUCB_ML1M");
  if (env == nullptr || !fs::exists(env)) GTEST_SKIP() << "SLINUCB_ML1M not set";
  const auto log = slu::load_interactions(env, slu::CsvSchema::movielens());
  EXPECT_EQ(log.size(), 1000209u);
  EXPECT_EQ(log.n_users(), 6040);
  EXPECT_EQ(log.n_items(), 3706);
}

TEST(SplitProtocol, EqualPeriods) {
  const auto s = slu::split_protocol(100, 0.8, 4);
  EXPECT_EQ(s.warmup.size(), 80u);
  ASSERT_EQ(s.periods.size(), 4u);
  for (const auto& p : s.periods) EXPECT_EQ(p.size(), 5u);
  EXPECT_EQ(s.periods.back().end, 100u);
}

TEST(SplitProtocol, LastPeriodAbsorbsRemainder) {
  const auto s = slu::split_protocol(101, 0.8, 4);
  EXPECT_EQ(s.warmup.size(), 80u);
  ASSERT_EQ(s.periods.size(), 4u);
  EXPECT_EQ(s.periods[0].size(), 5u);
  EXPECT_EQ(s.periods[1].size(), 5u);
  EXPECT_EQ(s.periods[2].size(), 5u);
  EXPECT_EQ(s.periods[3].size(), 6u);
  for (std::size_t i = 1; i < 4; ++i) EXPECT_EQ(s.periods[i].begin, s.periods[i - 1].end);
}

TEST(SplitProtocol, DefaultsToEightPeriods) {
  EXPECT_EQ(slu::kDefaultPeriods, 8u);
  EXPECT_EQ(slu::split_protocol(1000, 0.8).periods.size(), 8u);
}

TEST(SplitProtocol, Errors) {
  EXPECT_THROW(slu::split_protocol(100, 0.0, 4), std::invalid_argument);
  EXPECT_THROW(slu::split_protocol(100, 1.0, 4), std::invalid_argument);
  EXPECT_THROW(slu::split_protocol(100, 0.8, 0), std::invalid_argument);
  EXPECT_THROW(slu::split_protocol(10, 0.8, 4), slu::DataError);
  EXPECT_THROW(slu::split_protocol(1, 0.5, 1), slu::DataError);
}

TEST(FitSvd, Identity) {
  const auto model = slu::fit_svd(3, 3, from_dense(MatrixXd::Identity(3, 3)), 2);
  EXPECT_EQ(model.r_prime(), 2);
  EXPECT_LE((model.item_factors.transpose() * model.item_factors - MatrixXd::Identity(2, 2)).norm(), 1e-12);
  EXPECT_NEAR(model.singular_values(0), 1.0, 1e-12);
  EXPECT_NEAR(model.singular_values(1), 1.0, 1e-12);
}

TEST(FitSvd, RankOneIsExact) {
  MatrixXd a = MatrixXd::Zero(6, 7);
  for (int u : {0, 2, 3, 5})
    for (int i : {1, 4, 6}) a(u, i) = 1.0;
  const auto model = slu::fit_svd(6, 7, from_dense(a), 5);
  EXPECT_EQ(model.r_prime(), 5);
  EXPECT_NEAR(model.singular_values(0), std::sqrt(12.0), 1e-12);
  EXPECT_LE(model.singular_values.tail(4).maxCoeff(), 1e-10);
  EXPECT_LE((a - svd_reconstruction(model)).norm(), 1e-10);
}

TEST(FitSvd, RandomBinaryMatchesDenseOracle) {
  std::mt19937_64 rng(11);
  std::bernoulli_distribution coin(0.3);
  MatrixXd a(50, 40);
  for (Eigen::Index j = 0; j < 40; ++j)
    for (Eigen::Index i = 0; i < 50; ++i) a(i, j) = coin(rng) ? 1.0 : 0.0;
  const auto model = slu::fit_svd(50, 40, from_dense(a), 10);
  ASSERT_EQ(model.r_prime(), 10);
  const double oracle_err = (a - oracle::best_rank(a, 10)).norm();
  const double got_err = (a - svd_reconstruction(model)).norm();
  EXPECT_NEAR(got_err, oracle_err, 1e-8);

  Eigen::JacobiSVD<MatrixXd> dense(a);
  EXPECT_LE((model.singular_values - dense.singularValues().head(10)).cwiseAbs().maxCoeff(), 1e-8);
  for (Eigen::Index j = 1; j < 10; ++j) EXPECT_GE(model.singular_values(j - 1), model.singular_values(j));
  EXPECT_LE((model.item_factors.transpose() * model.item_factors - MatrixXd::Identity(10, 10)).norm(), 1e-10);
}

TEST(FitSvd, RankClampAndWarmMasks) {
  std::vector<slu::Interaction> warm = {{0, 0, 1, 0}, {1, 1, 1, 1}, {2, 0, 0, 2}};
  const auto model = slu::fit_svd(4, 3, warm, 10);
  EXPECT_EQ(model.r_prime(), 2);
  EXPECT_TRUE(model.user_is_warm(2));
  EXPECT_FALSE(model.user_is_warm(3));
  EXPECT_FALSE(model.item_is_warm(2));
  EXPECT_THROW(slu::build_context(model, 3, 0), slu::ColdEntity);
  EXPECT_THROW(slu::build_context(model, 0, 2), slu::ColdEntity);
  EXPECT_THROW(slu::build_context(model, 0, 99), slu::ColdEntity);
}

TEST(FitSvd, UsesOnlyGivenSplit) {
  TempDir dir;
  std::string body = "user_id,item_id,rating,timestamp\n";
  for (int t = 0; t < 40; ++t)
    body += std::to_string(t % 7) + "," + std::to_string((t * 3) % 5) + ",5," + std::to_string(t) + "\n";
  const auto log = slu::load_interactions(dir.file("log.csv", body), {});
  const auto split = slu::split_protocol(log.size(), 0.5, 2);
  const auto a = slu::fit_svd(log, slu::slice(log, split.warmup), 3);
  auto tampered = log;
  for (std::size_t i = split.warmup.end; i < tampered.size(); ++i) tampered.records[i].item = 0;
  const auto b = slu::fit_svd(tampered, slu::slice(tampered, split.warmup), 3);
  EXPECT_EQ(a.item_factors, b.item_factors);
  EXPECT_EQ(a.user_factors, b.user_factors);
}

TEST(FitSvd, Errors) {
  const std::vector<slu::Interaction> one = {{0, 0, 1, 0}};
  EXPECT_THROW(slu::fit_svd(2, 2, one, 0), std::invalid_argument);
  EXPECT_THROW(slu::fit_svd(1, 5, one, 2), slu::DataError);
  EXPECT_THROW(slu::fit_svd(2, 2, std::span<const slu::Interaction>(), 2), slu::DataError);
}

TEST(BuildContext, RowMajorOverUser) {
  slu::FeatureModel m;
  m.user_factors = MatrixXd{{1.0, 0.0}};
  m.item_factors = MatrixXd{{0.0, 1.0}};
  m.user_warm = {1};
  m.item_warm = {1};
  const VectorXd x = slu::build_context(m, 0, 0);
  EXPECT_EQ(x, (VectorXd{{0.0, 1.0, 0.0, 0.0}}));
}

TEST(BuildContext, NormIsProductOfNorms) {
  std::mt19937_64 rng(3);
  slu::FeatureModel m;
  m.user_factors = oracle::random_matrix(rng, 4, 6);
  m.item_factors = oracle::random_matrix(rng, 5, 6);
  m.user_warm.assign(4, 1);
  m.item_warm.assign(5, 1);
  for (int u = 0; u < 4; ++u)
    for (int i = 0; i < 5; ++i)
      EXPECT_NEAR(slu::build_context(m, u, i).norm(), m.user_factors.row(u).norm() * m.item_factors.row(i).norm(),
                  1e-12);
}

TEST(BuildContext, LengthIsRPrimeSquared) {
  slu::FeatureModel m;
  m.user_factors = MatrixXd::Ones(1, 41);
  m.item_factors = MatrixXd::Ones(1, 41);
  m.user_warm = {1};
  m.item_warm = {1};
  EXPECT_EQ(m.context_dim(), 1681);
  EXPECT_EQ(slu::build_context(m, 0, 0).size(), 1681);
}

TEST(BuildContext, FlatteningIsABijection) {
  for (Eigen::Index r = 1; r <= 8; ++r) {
    slu::FeatureModel m;
    m.user_factors = MatrixXd::Identity(r, r);
    m.item_factors = MatrixXd::Identity(r, r);
    m.user_warm.assign(static_cast<std::size_t>(r), 1);
    m.item_warm.assign(static_cast<std::size_t>(r), 1);
    std::vector<int> hits(static_cast<std::size_t>(r * r), 0);
    for (Eigen::Index i = 0; i < r; ++i) {
      for (Eigen::Index j = 0; j < r; ++j) {
        const VectorXd x = slu::build_context(m, i, j);
        Eigen::Index pos = 0;
        EXPECT_DOUBLE_EQ(x.maxCoeff(&pos), 1.0);
        EXPECT_DOUBLE_EQ(x.sum(), 1.0);
        EXPECT_EQ(pos, i * r + j);
        ++hits[static_cast<std::size_t>(pos)];
      }
    }
    for (int h : hits) EXPECT_EQ(h, 1);
  }
}

TEST(FeatureSnapshot, RoundTrip) {
  TempDir dir;
  std::mt19937_64 rng(5);
  std::bernoulli_distribution coin(0.4);
  MatrixXd a(12, 9);
  for (Eigen::Index j = 0; j < 9; ++j)
    for (Eigen::Index i = 0; i < 12; ++i) a(i, j) = coin(rng) ? 1.0 : 0.0;
  const auto model = slu::fit_svd(12, 9, from_dense(a), 4);
  const fs::path p = dir.path() / "features.bin";
  slu::write_feature_model(p, model);
  const auto back = slu::read_feature_model(p);
  EXPECT_EQ(back.item_factors, model.item_factors);
  EXPECT_EQ(back.user_factors, model.user_factors);
  EXPECT_EQ(back.singular_values, model.singular_values);
  EXPECT_EQ(back.user_warm, model.user_warm);
  EXPECT_EQ(back.item_warm, model.item_warm);

  std::ofstream(dir.path() / "junk.bin") << "not a model";
  EXPECT_THROW(slu::read_feature_model(dir.path() / "junk.bin"), slu::DataError);
}
