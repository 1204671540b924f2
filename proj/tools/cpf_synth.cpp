#include <iostream>

#include "CLI11.hpp"
#include "cpf/synth.hpp"
#include "json.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Write a synthetic puppet dataset and transfer inputs"};
  std::string out;
  cpf::FixtureOptions o;
  app.add_option("--out", out, "Output directory")->required();
  app.add_option("--videos", o.num_videos, "Number of videos (the last is the test split)")->check(CLI::Range(2, 1000));
  app.add_option("--frames", o.num_frames, "Frames per video")->check(CLI::PositiveNumber);
  app.add_option("--height", o.height, "Frame height")->check(CLI::PositiveNumber);
  app.add_option("--width", o.width, "Frame width")->check(CLI::PositiveNumber);
  app.add_option("--working-size", o.working_size, "Crop resolution")->check(CLI::PositiveNumber);
  app.add_option("--seed", o.seed, "Random seed");
  app.add_option("--train-steps", o.train_steps, "max_steps written into every stage config");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  try {
    const auto p = cpf::write_synthetic_fixture(out, o);
    std::cout << nlohmann::json{{"manifest", p.manifest.string()},
                                {"config", p.config.string()},
                                {"appearance", p.appearance.string()},
                                {"source", p.source_poses.string()},
                                {"background", p.background.string()}}
                     .dump()
              << std::endl;
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", e.what()}, {"kind", "runtime"}}.dump() << std::endl;
    return 1;
  }
  return 0;
}
