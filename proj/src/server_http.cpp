#include <httplib.h>

#include "crp/service.hpp"

namespace crp {

void run_http_server(Service& service, const std::string& bind, int port) {
  httplib::Server server;
  auto forward = [&service](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> query;
    for (const auto& [k, v] : req.params) query[k] = v;
    const auto out = service.handle(req.method, req.path, query, req.body);
    res.status = out.status;
    res.set_content(out.body, out.content_type);
  };
  server.Get(".*", forward);
  server.Post(".*", forward);
  if (!server.bind_to_port(bind, port)) {
    fail(ErrorKind::usage, "cannot bind " + bind + ":" + std::to_string(port));
  }
  server.listen_after_bind();
}

}  // namespace crp
