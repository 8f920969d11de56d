// Browser entry: wire the controller to the DOM and resume any session
// state the server log already holds for this session id.

import { ApiClient, HttpTransport } from "./api";
import { SessionController } from "./session";
import { render } from "./view";

const params = new URLSearchParams(window.location.search);
const baseUrl = params.get("server") ?? "";
const sessionId = params.get("session") ?? `web-${Math.random().toString(36).slice(2, 10)}`;

const api = new ApiClient(new HttpTransport(baseUrl));
const controller = new SessionController(api, sessionId);
const root = document.getElementById("app") as HTMLElement;

function paint(): void {
  render(document, root, controller.screen(), baseUrl, {
    onJudge: (verdict) => void controller.judge(verdict).then(paint).catch(fail),
    onLabel: (patch, label) => void controller.setLabel(patch, label).then(paint).catch(fail),
    onSubmitLabels: () => {
      paint(); // show the wait screen immediately
      void controller.submitAndSplit().then(paint).catch(fail);
    },
    onAssess: (a, b) => void controller.assess(a, b).then(paint).catch(fail),
  });
  const effort = controller.effort();
  const footer = document.createElement("p");
  footer.className = "effort";
  footer.textContent = `decisions: ${effort.decisions}, elapsed: ${(effort.elapsedMs / 1000).toFixed(0)}s`;
  root.appendChild(footer);
}

function fail(err: unknown): void {
  const box = document.createElement("p");
  box.className = "error";
  box.textContent = String(err);
  root.appendChild(box);
}

void controller
  .resume()
  .then(paint)
  .catch(() => controller.start().then(paint).catch(fail));
