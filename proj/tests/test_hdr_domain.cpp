#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "hdt/hdr.hpp"
#include "hdt/training.hpp"
#include "oracles.hpp"

using namespace hdt;
namespace fs = std::filesystem;

// 40-digit evaluations of log(1 + 5000x)/log(5001) and x^2.2.
constexpr double kMuHalf = 0.9186432718796463309494592219004114692128;
constexpr double kMuQuarter = 0.8373100040042942954562524649236010632488;
constexpr double kHalfPow22 = 0.2176376408240310347840675043699365247448;
constexpr double kHalfPow22Over4 = 0.05440941020600775869601687609248413118619;

TEST_CASE("mu_law endpoints are exact") {
  CHECK(mu_law(0.0) == 0.0);
  CHECK(mu_law(1.0) == 1.0);
  CHECK(mu_law(0.0, 10.0) == 0.0);
  CHECK(mu_law(1.0, 10.0) == 1.0);
}

TEST_CASE("mu_law and gamma match high-precision values") {
  CHECK(std::abs(mu_law(0.5, 5000.0) - kMuHalf) <= 1e-9);
  CHECK(std::abs(mu_law(0.25, 5000.0) - kMuQuarter) <= 1e-9);
  CHECK(std::abs(gamma_correct(0.5, 1.0, 2.2) - kHalfPow22) <= 1e-9);
  CHECK(std::abs(gamma_correct(0.5, 4.0, 2.2) - kHalfPow22Over4) <= 1e-9);
}

TEST_CASE("mu_law clamps and is monotone") {
  CHECK(mu_law(-0.5) == 0.0);
  CHECK(mu_law(1.5) == 1.0);
  double prev = -1;
  for (int i = 0; i <= 100; ++i) {
    const double v = mu_law(i / 100.0);
    CHECK(v > prev);
    prev = v;
  }
}

TEST_CASE("gamma_correct rejects non-positive exposure") {
  CHECK_THROWS_AS(gamma_correct(0.5, 0.0), Error);
}

TEST_CASE("PFM round trip is bit-exact") {
  std::mt19937_64 rng(30);
  HdrImage img{oracle::random_tensor<float>(Shape{7, 5, 3}, rng, 0.0, 50.0)};
  img.pixels[0] = 0.0f;
  img.pixels[1] = 1e-30f;
  img.pixels[2] = 3.4e38f;
  const auto back = decode_pfm(encode_pfm(img));
  CHECK(back.pixels == img.pixels);
}

TEST_CASE("PFM big-endian payloads decode") {
  // 1×1 image, positive scale, big-endian floats 1.0, 2.0, 0.5.
  std::string bytes = "PF\n1 1\n1.0\n";
  for (float f : {1.0f, 2.0f, 0.5f}) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    for (int s = 24; s >= 0; s -= 8) bytes.push_back(static_cast<char>((u >> s) & 0xff));
  }
  const auto img = decode_pfm(bytes);
  CHECK(img.pixels.vec() == std::vector<float>{1.0f, 2.0f, 0.5f});
}

TEST_CASE("PFM rows are stored bottom-up") {
  HdrImage img{Tensor<float>(Shape{2, 1, 3}, std::vector<float>{1, 1, 1, 2, 2, 2})};
  const auto bytes = encode_pfm(img);
  float first;
  std::memcpy(&first, bytes.data() + bytes.size() - 24, 4);
  CHECK(first == 2.0f);
}

TEST_CASE("grayscale and truncated PFM are rejected") {
  CHECK_THROWS_AS(decode_pfm("Pf\n1 1\n-1.0\n\0\0\0\0"), FormatError);
  CHECK_THROWS_AS(decode_pfm("PF\n2 2\n-1.0\n1234"), FormatError);
}

TEST_CASE("PPM round trip is within half a quantization step") {
  std::mt19937_64 rng(31);
  const auto px = oracle::random_tensor<float>(Shape{6, 9, 3}, rng, 0.0, 1.0);
  for (unsigned maxval : {255u, 65535u}) {
    const auto back = decode_ppm(encode_ppm(px, maxval));
    double err = 0;
    for (std::size_t i = 0; i < px.size(); ++i) err = std::max(err, std::abs(double(back[i]) - double(px[i])));
    CHECK(err <= 1.0 / (2.0 * maxval) + 1e-7);
  }
}

TEST_CASE("PPM header errors carry an offset") {
  CHECK_THROWS_AS(decode_ppm("P3\n1 1\n255\n\0\0\0"), FormatError);
  CHECK_THROWS_AS(decode_ppm("P6\n2 2\n255\n\0\0\0"), FormatError);
}

TEST_CASE("normalize_radiance is idempotent") {
  std::mt19937_64 rng(32);
  auto px = oracle::random_tensor<float>(Shape{20, 20, 3}, rng, 0.0, 30.0);
  const double s = normalize_radiance(px);
  CHECK(s > 0);
  auto again = px;
  normalize_radiance(again);
  CHECK(again == px);
  for (float v : px.data()) CHECK((v >= 0.0f && v <= 1.0f));
}

TEST_CASE("exposure file parsing") {
  const auto e = parse_exposures("-2\n0\n2\n");
  CHECK(e[0] == -2.0);
  CHECK(e[2] == 2.0);
  CHECK(parse_exposures("\xE2\x88\x92" "2\n0\n2\n")[0] == -2.0);
  CHECK_THROWS_AS(parse_exposures("0\n0\n2\n"), Error);
  CHECK_THROWS_AS(parse_exposures("0\n2\n"), Error);
}

TEST_CASE("sample save and load round trip") {
  const auto dir = fs::temp_directory_path() / "hdt_test_sample";
  fs::remove_all(dir);
  const auto s = synth_dataset(1, 3, 16)[0];
  save_sample(dir / "a", s);
  const auto back = load_sample(dir / "a");
  CHECK(back.id == "a");
  REQUIRE(back.ground_truth.has_value());
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.ldr[i].exposure_time == doctest::Approx(s.ldr[i].exposure_time).epsilon(1e-12));
    double err = 0;
    for (std::size_t p = 0; p < s.ldr[i].pixels.size(); ++p)
      err = std::max(err, std::abs(double(back.ldr[i].pixels[p]) - double(s.ldr[i].pixels[p])));
    CHECK(err <= 1.0 / (2.0 * 65535) + 1e-7);
  }
  fs::remove_all(dir);
}

TEST_CASE("missing sample files raise IoError") {
  const auto dir = fs::temp_directory_path() / "hdt_test_empty";
  fs::create_directories(dir);
  CHECK_THROWS_AS(load_sample(dir), IoError);
  fs::remove_all(dir);
}

TEST_CASE("validate catches mismatched shapes and exposures") {
  auto s = synth_dataset(1, 4, 16)[0];
  CHECK_NOTHROW(validate(s));
  auto bad = s;
  bad.ldr[2].exposure_time = bad.ldr[1].exposure_time;
  CHECK_THROWS(validate(bad));
  bad = s;
  bad.ldr[0].pixels = Tensor<float>(Shape{8, 16, 3});
  CHECK_THROWS_AS(validate(bad), ShapeError);
}

TEST_CASE("build_input stacks LDR and gamma-corrected channels") {
  const auto s = synth_dataset(1, 5, 16)[0];
  const auto in = build_input<double>(s);
  CHECK(in[0].shape() == Shape{1, 16, 16, 6});
  const double ldr = s.ldr[2].pixels[7 * 3 + 1];
  CHECK(in[2][7 * 6 + 1] == static_cast<double>(ldr));
  CHECK(std::abs(in[2][7 * 6 + 4] - std::pow(double(ldr), 2.2) / s.ldr[2].exposure_time) < 1e-6);
}

TEST_CASE("gamma_correct endpoints") {
  CHECK(gamma_correct(1.0, 1.0) == 1.0);
  CHECK(gamma_correct(0.0, 0.25) == 0.0);
  CHECK(gamma_correct(0.0, 4.0) == 0.0);
}

TEST_CASE("PPM format laws") {
  const std::string one = std::string("P6\n1 1\n255\n") + '\xff' + '\0' + '\0';
  CHECK(decode_ppm(one).vec() == std::vector<float>{1.0f, 0.0f, 0.0f});
  const auto img = decode_ppm(std::string("P6 2 2 255\n") + std::string(12, '\x80'));
  CHECK(img.shape() == Shape{2, 2, 3});
}

TEST_CASE("PFM payload length must match the header") {
  auto bytes = encode_pfm(HdrImage{Tensor<float>(Shape{2, 2, 3}, 0.5f)});
  CHECK_THROWS_AS(decode_pfm(bytes + std::string(4, '\0')), FormatError);
  CHECK_THROWS_AS(decode_pfm(bytes.substr(0, bytes.size() - 4)), FormatError);
}

TEST_CASE("exposure values map to times 2^e and samples may omit ground truth") {
  const auto dir = fs::temp_directory_path() / "hdt_test_exposures";
  fs::remove_all(dir);
  auto s = synth_dataset(1, 7, 16)[0];
  s.ground_truth.reset();
  save_sample(dir / "s", s);
  {
    std::ofstream e(dir / "s" / "exposures.txt", std::ios::binary);
    e << "\xE2\x88\x92" "2\n0\n2";
  }
  const auto back = load_sample(dir / "s");
  CHECK(back.ldr[0].exposure_time == 0.25);
  CHECK(back.ldr[1].exposure_time == 1.0);
  CHECK(back.ldr[2].exposure_time == 4.0);
  CHECK(!back.ground_truth.has_value());
  {
    std::ofstream e(dir / "s" / "exposures.txt", std::ios::binary);
    e << "0\n0\n2\n";
  }
  CHECK_THROWS(load_sample(dir / "s"));
  fs::remove_all(dir);
}

TEST_CASE("build_input preserves H and W for every exposure") {
  const auto s = synth_dataset(1, 5, 32)[0];
  for (const auto& t : build_input<float>(s)) CHECK(t.shape() == Shape{1, 32, 32, 6});
  const auto in = build_input<float>(s);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t p = 0; p < 32 * 32; ++p)
      for (std::size_t c = 0; c < 3; ++c) {
        CHECK(in[i][p * 6 + c] == s.ldr[i].pixels[p * 3 + c]);
        CHECK(in[i][p * 6 + 3 + c] == gamma_correct(s.ldr[i])[p * 3 + c]);
      }
}
