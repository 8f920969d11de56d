// DOM rendering for the three study screens.  Layout follows the study
// figures: patch grids are 2 rows x 5 columns at the served k of 10.

import type { Screen } from "./session";
import type { ConceptLabel, PatchPayload } from "./types";

export interface ViewCallbacks {
  onJudge(verdict: "consistent" | "inconsistent"): void;
  onLabel(patchId: number, label: ConceptLabel): void;
  onSubmitLabels(): void;
  onAssess(a: "more" | "less", b: "more" | "less"): void;
}

const LABELS: ConceptLabel[] = ["A", "B", "SomethingElse"];

function el<K extends keyof HTMLElementTagNameMap>(
  doc: Document,
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = doc.createElement(tag);
  if (className) node.className = className;
  if (text) node.textContent = text;
  return node;
}

function patchGrid(
  doc: Document,
  patches: PatchPayload[],
  baseUrl: string,
  cell?: (patch: PatchPayload, cellNode: HTMLElement) => void,
): HTMLElement {
  const grid = el(doc, "div", "patch-grid");
  grid.style.display = "grid";
  grid.style.gridTemplateColumns = "repeat(5, 1fr)";
  for (const patch of patches) {
    const cellNode = el(doc, "div", "patch-cell");
    const img = el(doc, "img");
    img.src = baseUrl + patch.thumbnail_url;
    img.title = `${patch.image_id} @ (${patch.location[0]},${patch.location[1]})`;
    cellNode.appendChild(img);
    cell?.(patch, cellNode);
    grid.appendChild(cellNode);
  }
  return grid;
}

export function render(
  doc: Document,
  root: HTMLElement,
  screen: Screen,
  baseUrl: string,
  callbacks: ViewCallbacks,
): void {
  root.replaceChildren();
  const header = el(
    doc,
    "h2",
    "phase-title",
    screen.phase === "done"
      ? "All prototypes reviewed"
      : `Prototype ${screen.prototypeId} (${screen.position + 1}/${screen.queueLength})`,
  );
  root.appendChild(header);

  if (screen.phase === "judge") {
    root.appendChild(el(doc, "p", "", "Is this prototypical part consistent?"));
    root.appendChild(patchGrid(doc, screen.patches, baseUrl));
    for (const verdict of ["consistent", "inconsistent"] as const) {
      const button = el(doc, "button", `judge-${verdict}`, verdict);
      button.onclick = () => callbacks.onJudge(verdict);
      root.appendChild(button);
    }
  } else if (screen.phase === "label") {
    root.appendChild(
      el(doc, "p", "", "Label every patch as Concept A, Concept B, or Something else."),
    );
    root.appendChild(
      patchGrid(doc, screen.patches, baseUrl, (patch, cellNode) => {
        for (const label of LABELS) {
          const button = el(doc, "button", "label-choice", label);
          if (screen.labels.get(patch.patch_id) === label) {
            button.classList.add("selected");
          }
          button.onclick = () => callbacks.onLabel(patch.patch_id, label);
          cellNode.appendChild(button);
        }
      }),
    );
    if (screen.labelError) {
      root.appendChild(el(doc, "p", "label-error", screen.labelError));
    }
    const submit = el(doc, "button", "submit-labels", "Split this prototype");
    submit.onclick = () => callbacks.onSubmitLabels();
    root.appendChild(submit);
  } else if (screen.phase === "wait") {
    const progress = screen.progress;
    const text = progress?.step
      ? `splitting... step ${progress.step}, loss ${progress.loss?.toFixed(4)}`
      : "splitting...";
    root.appendChild(el(doc, "p", "progress", text));
  } else if (screen.phase === "assess" && screen.result) {
    root.appendChild(
      el(doc, "p", "", "Are the new prototypical parts more consistent than before?"),
    );
    const pick: { a?: "more" | "less"; b?: "more" | "less" } = {};
    for (const side of ["a", "b"] as const) {
      const channel = side === "a" ? screen.result.channel_a : screen.result.channel_b;
      const panel = el(doc, "div", `channel-${side}`);
      panel.appendChild(el(doc, "h3", "", `Channel ${channel.channel}`));
      panel.appendChild(patchGrid(doc, channel.patches, baseUrl));
      for (const verdict of ["more", "less"] as const) {
        const button = el(doc, "button", `assess-${side}-${verdict}`, `${verdict} consistent`);
        button.onclick = () => {
          pick[side] = verdict;
          if (pick.a && pick.b) callbacks.onAssess(pick.a, pick.b);
        };
        panel.appendChild(button);
      }
      root.appendChild(panel);
    }
  }
}
