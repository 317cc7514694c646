// eviatta_server: HTTP annotation sessions for instance-wise adaptation.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "eviatta/service.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Interactive annotation service"};
  std::string host = "127.0.0.1", checkpoint;
  int port = 8080;
  std::size_t max_sessions = 64;
  app.add_option("--port", port, "Listen port")->check(CLI::Range(1, 65535));
  app.add_option("--host", host, "Bind address");
  app.add_option("--checkpoint", checkpoint, "Pretrained checkpoint served to new sessions")->required();
  app.add_option("--max-sessions", max_sessions, "Concurrent session cap");
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  eviatta::AnnotationService service({checkpoint, max_sessions});
  httplib::Server server;
  service.mount(server);
  std::cerr << "listening on " << host << ":" << port << "\n";
  if (!server.listen(host, port)) {
    std::cerr << "error: cannot listen on " << host << ":" << port << "\n";
    return 1;
  }
  return 0;
}
