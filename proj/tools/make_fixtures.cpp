// Writes the packaged fixtures: the exemplar scene and the two scripted episodes.
#include "scenepred/datagen.hpp"
#include "scenepred/numerics/checkpoint.hpp"

#include <filesystem>
#include <iostream>

int main(int argc, char** argv) {
  namespace fs = std::filesystem;
  using namespace scenepred;
  const fs::path dir = argc > 1 ? fs::path(argv[1]) : fs::path("fixtures");
  fs::create_directories(dir);
  io::write_text_atomic(dir / "exemplar_scene.json", datagen::snapshot_to_json(datagen::exemplar_snapshot()).dump(2) + "\n");
  const std::pair<const char*, datagen::ScriptedCase> cases[] = {{"pass_right", datagen::ScriptedCase::pass_right},
                                                                  {"yield_right", datagen::ScriptedCase::yield_right}};
  for (const auto& [name, which] : cases) {
    const auto ep = datagen::scripted_episode(which);
    const std::string stem = name;
    io::write_text_atomic(dir / (stem + "_snapshot.json"), datagen::snapshot_to_json(ep.frames.front()).dump(2) + "\n");
    datagen::write_dataset(dir / (stem + ".jsonl"), std::span(&ep, 1));
  }
  std::cout << "fixtures written to " << dir.string() << "\n";
  return 0;
}
